// Copyright 2026 The promptreco Authors.
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

// Import and export of files between sites.
//
// Both pipelines are pure transition functions over plain state. Drivers
// perform the file copies, feed completions back in, and keep an event or
// status log that replays to the same state.
//
// Import job lifecycle:
//
//   pending -> staging -> transferring -> archiving -> done
//   any active stage --error--> failed --retry_interval--> the same stage
//   transferring --digest mismatch--> pending
//   more than max_retries errors --> failed for good, one notification
//
// A job whose stage work is finished keeps its slot until the next stage
// has room, so the per-stage caps bound the files held at each stage.
//
// Export file lifecycle (one status row per transition):
//
//   open -> closed -> qa_pending -> qa_passed -> transferring -> verified
//                                \-> qa_failed (quarantined, alert)
//   transferring --destination digest mismatch--> transferring

#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "promptreco/bytes.hpp"

namespace promptreco {

// -- import ----------------------------------------------------------------------

enum class ImportStage : std::uint8_t { pending, staging, transferring, archiving, done, failed };
std::string_view to_string(ImportStage s);

struct ImportCaps {
  std::size_t staging = 1;
  std::size_t transferring = 3;
  std::size_t archiving = 1;
  std::size_t cap(ImportStage s) const;
  friend bool operator==(const ImportCaps&, const ImportCaps&) = default;
};

struct ImportJob {
  std::string file;
  ImportStage state = ImportStage::pending;
  std::optional<ImportStage> failed_from;
  bool permanent = false;
  bool stage_complete = false;  // waiting for a slot in the next stage
  std::uint32_t retries = 0;
  std::string last_error;
  std::string source_digest;
  std::string received_digest;
  double retry_at = 0;
  bool notified = false;
  std::string archive_path;

  friend bool operator==(const ImportJob&, const ImportJob&) = default;
};

struct ImportState {
  std::vector<ImportJob> jobs;
  ImportCaps caps;
  double retry_interval_s = 30;
  std::uint32_t max_retries = 5;
  double now = 0;
  std::uint64_t ignored_events = 0;

  std::size_t occupancy(ImportStage s) const;
  const ImportJob* find(std::string_view file) const;
  bool quiescent() const;  // every job done or failed for good
  nlohmann::json to_json() const;
  friend bool operator==(const ImportState&, const ImportState&) = default;
};

struct ImportEvent {
  enum Kind : std::uint8_t { submit, clock, staged, transferred, archived, error } kind = clock;
  std::string file;
  double time = 0;
  std::string digest;  // source digest on submit, received digest on transferred
  std::string detail;  // error text, or archive path on archived

  nlohmann::json to_json() const;
  static ImportEvent from_json(const nlohmann::json& j);
};

struct ImportAction {
  enum Kind : std::uint8_t { stage, transfer, archive, notify } kind = stage;
  std::string file;
  std::string message;
  friend bool operator==(const ImportAction&, const ImportAction&) = default;
};

/// Pure: the same state and event always give the same result.
std::pair<ImportState, std::vector<ImportAction>> import_tick(ImportState state, const ImportEvent& event);

/// Compares source and received digests of a finished transfer.
bool verify_import(const ImportJob& job);

struct ImportOptions {
  std::filesystem::path source_dir;   // remote site
  std::filesystem::path staging_dir;  // remote disk after staging
  std::filesystem::path dest_dir;     // local disk
  std::filesystem::path archive_dir;  // local tape stand-in
  ImportCaps caps;
  double retry_interval_s = 30;
  std::uint32_t max_retries = 5;
  std::uint64_t seed = 1;
  /// Simulated seconds per completion step; the clock also jumps to the next retry when idle.
  double step_s = 1.0;
  /// Called on each transfer; returning true flips a byte in the received copy.
  std::function<bool(const std::string& file, std::uint32_t attempt)> corrupt;
  /// Called on each action; returning a message fails it.
  std::function<std::optional<std::string>(const ImportAction&, std::uint32_t attempt)> fail;
  std::function<void(const ImportState&)> on_tick;
  std::optional<std::filesystem::path> event_log;
};

struct ImportReport {
  ImportState final_state;
  std::vector<ImportEvent> events;
  std::vector<ImportAction> notifications;
  std::size_t max_staging = 0, max_transferring = 0, max_archiving = 0;
  std::uint64_t corruptions_injected = 0;
  std::uint64_t corruptions_caught = 0;
};

/// Runs the import of every file in `files` to quiescence. Completions of
/// concurrently active stages arrive in a seeded random order.
ImportReport run_import(const std::vector<std::string>& files, const ImportOptions& opts);

/// Rebuilds the state from an event log.
ImportState replay_import(const std::vector<ImportEvent>& events, ImportState initial = {});
std::vector<ImportEvent> read_import_log(const std::filesystem::path& path);

// -- export ----------------------------------------------------------------------

enum class ExportState : std::uint8_t { open, closed, qa_pending, qa_passed, qa_failed, transferring, verified };
std::string_view to_string(ExportState s);

struct ExportFile {
  std::string name;
  ExportState state = ExportState::open;
  std::string recorded_digest;
  std::string qa_error;
  std::uint32_t transfers = 0;
  bool alerted = false;
  friend bool operator==(const ExportFile&, const ExportFile&) = default;
};

struct StatusRow {
  std::uint64_t seq = 0;
  std::string file;
  std::string from;
  std::string to;
  std::string detail;
  nlohmann::json to_json() const;
  static StatusRow from_json(const nlohmann::json& j);
  friend bool operator==(const StatusRow&, const StatusRow&) = default;
};

struct ExportCycle {
  std::string id;
  std::map<std::string, ExportFile> files;
  std::uint64_t rows = 0;

  bool finished() const;  // every file verified or quarantined with its alert sent
  nlohmann::json to_json() const;
  friend bool operator==(const ExportCycle&, const ExportCycle&) = default;
};

struct ExportEvent {
  enum Kind : std::uint8_t { add, closed, qa_done, transferred, verified, alert_sent } kind = add;
  std::string file;
  bool ok = true;
  std::string digest;
  std::string detail;
};

struct ExportAction {
  enum Kind : std::uint8_t { close, qa, transfer, verify, alert } kind = close;
  std::string file;
  std::string detail;
  friend bool operator==(const ExportAction&, const ExportAction&) = default;
};

struct ExportStep {
  ExportCycle cycle;
  std::vector<StatusRow> rows;
  std::vector<ExportAction> actions;
};

/// Pure per-file state machine step.
ExportStep export_cycle_step(ExportCycle cycle, const ExportEvent& event);

/// Applies status rows to an empty cycle.
ExportCycle replay_export(std::string id, const std::vector<StatusRow>& rows);

/// Actions a resumed cycle owes, derived from persisted state alone.
std::vector<ExportAction> pending_export_actions(const ExportCycle& cycle);

struct ExportOptions {
  std::string cycle_id = "cycle-1";
  std::filesystem::path dest_dir;
  std::filesystem::path status_log;
  /// Delivered with a stable key so a resumed cycle can resend safely.
  std::function<void(const std::string& key, const std::string& message)> alert;
  /// Returning true flips a byte in the destination copy.
  std::function<bool(const std::string& file, std::uint32_t attempt)> corrupt_in_transit;
  /// Called before each action; returning true simulates a crash there.
  std::function<bool(const ExportAction&)> crash_before;
};

struct ExportReport {
  ExportCycle cycle;
  std::uint64_t copies = 0;  // destination writes actually performed
  std::uint64_t alerts = 0;
  bool crashed = false;
};

/// Exports `files` (database files, by path) through the FSM, resuming from
/// the status log when it already exists.
ExportReport run_export(const std::vector<std::filesystem::path>& files, const ExportOptions& opts);

std::vector<StatusRow> read_status_log(const std::filesystem::path& path);

}  // namespace promptreco
