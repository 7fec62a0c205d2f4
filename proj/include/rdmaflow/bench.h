/* Copyright 2026 The rdmaflow Authors. All Rights Reserved.

Licensed under the Apache License, Version 2.0 (the "License");
you may not use this file except in compliance with the License.
You may obtain a copy of the License at

    http://www.apache.org/licenses/LICENSE-2.0

Unless required by applicable law or agreed to in writing, software
distributed under the License is distributed on an "AS IS" BASIS,
WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
See the License for the specific language governing permissions and
limitations under the License.
==============================================================================*/

// Scenario configuration and drivers behind the benchmark CLI.

#ifndef RDMAFLOW_BENCH_H_
#define RDMAFLOW_BENCH_H_

#include <cstdint>
#include <ostream>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "rdmaflow/runtime.h"

namespace rdmaflow::bench {

enum class ScenarioKind : uint8_t { kMicrobench, kPsTrain };
std::string_view ScenarioName(ScenarioKind k);

struct Preset {
  std::string_view name;
  double model_mb;  // MB = 2^20 bytes
  uint32_t variables;
  double compute_ms;
};
const std::vector<Preset>& Presets();

struct ScenarioConfig {
  ScenarioKind scenario = ScenarioKind::kMicrobench;
  std::string preset;  // empty when sizes were given directly

  // microbench: one row per size and mechanism
  std::vector<uint64_t> sizes;  // defaults to 1 KiB .. 64 MiB by powers of 4

  // ps_train
  uint64_t model_bytes = 4 * kMiB;
  uint32_t num_variables = 4;
  double compute_ms = 0;
  uint32_t workers = 2;
  uint32_t ps_shards = 1;
  ClassifyMode classify = ClassifyMode::kAuto;

  int64_t iterations = 0;  // 0: 3 for microbench, 10 for ps_train
  std::vector<TransferMode> mechanisms{TransferMode::kZeroCopy, TransferMode::kCopy,
                                       TransferMode::kRpc};
  CostModel cost;
  uint64_t seed = 1;
  double scale = 1.0 / 64;  // applied to preset model sizes
  DriverKind driver = DriverKind::kCooperative;
  bool report_wall_time = true;

  int64_t resolved_iterations() const;
};

// Line-based `key = value` text; `#` starts a comment. Throws UnknownKey
// or BadValue.
ScenarioConfig ParseConfig(std::string_view text);
// Cross-field checks after command-line overrides. Throws BadValue.
void ValidateConfig(const ScenarioConfig& cfg);
// Every setting after defaults and presets, in a fixed order.
std::vector<std::pair<std::string, std::string>> ResolvedConfig(const ScenarioConfig& cfg);

std::vector<CsvRow> RunMicrobench(const ScenarioConfig& cfg);
// One aggregate row per iteration and mechanism (`ps_train`, arena peak is
// the maximum over servers) followed by one row per server
// (`ps_train@s<id>`).
std::vector<CsvRow> RunPs(const ScenarioConfig& cfg);
std::vector<CsvRow> RunScenario(const ScenarioConfig& cfg);

// Transfer plans of every session the scenario would build.
std::string DumpPlans(const ScenarioConfig& cfg);

// Resolved config as comment lines, then the CSV.
void WriteScenarioCsv(std::ostream& os, const ScenarioConfig& cfg,
                      const std::vector<CsvRow>& rows);

// Microbenchmark graph: an Input of `bytes / 4` floats on server 0 read by
// ReduceMax on server 1.
DataFlowGraph MicrobenchGraph(uint64_t bytes, Placement* placement);
PsWorkloadOptions PsOptions(const ScenarioConfig& cfg);

}  // namespace rdmaflow::bench

#endif  // RDMAFLOW_BENCH_H_
