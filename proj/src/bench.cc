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

#include "rdmaflow/bench.h"

#include <algorithm>
#include <cctype>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <optional>
#include <set>
#include <sstream>

#include "rdmaflow/errors.h"
#include "rdmaflow/transfer.h"

namespace rdmaflow::bench {
namespace {

std::string_view Trim(std::string_view s) {
  while (!s.empty() && std::isspace(static_cast<unsigned char>(s.front()))) s.remove_prefix(1);
  while (!s.empty() && std::isspace(static_cast<unsigned char>(s.back()))) s.remove_suffix(1);
  return s;
}

[[noreturn]] void BadValue(std::string_view key, std::string_view value,
                           std::string_view why) {
  Fail(ErrorCode::kBadValue, std::string(key) + " = '" + std::string(value) + "': " +
                                 std::string(why));
}

uint64_t ParseU64(std::string_view key, std::string_view v) {
  uint64_t out = 0;
  auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || p != v.data() + v.size()) BadValue(key, v, "expected an integer");
  return out;
}

double ParseDouble(std::string_view key, std::string_view v) {
  double out = 0;
  auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || p != v.data() + v.size() || !std::isfinite(out)) {
    BadValue(key, v, "expected a number");
  }
  return out;
}

// Accepts "1/64" as well as decimals.
double ParseFraction(std::string_view key, std::string_view v) {
  const size_t slash = v.find('/');
  if (slash == std::string_view::npos) return ParseDouble(key, v);
  const double num = ParseDouble(key, Trim(v.substr(0, slash)));
  const double den = ParseDouble(key, Trim(v.substr(slash + 1)));
  if (den == 0) BadValue(key, v, "division by zero");
  return num / den;
}

bool ParseBool(std::string_view key, std::string_view v) {
  if (v == "true" || v == "1" || v == "yes" || v == "on") return true;
  if (v == "false" || v == "0" || v == "no" || v == "off") return false;
  BadValue(key, v, "expected true or false");
}

std::vector<std::string_view> SplitList(std::string_view v) {
  std::vector<std::string_view> out;
  while (true) {
    const size_t comma = v.find(',');
    out.push_back(Trim(v.substr(0, comma)));
    if (comma == std::string_view::npos) break;
    v.remove_prefix(comma + 1);
  }
  return out;
}

std::string Canonical(std::string_view name) {
  std::string out;
  for (char c : name) {
    if (std::isalnum(static_cast<unsigned char>(c))) {
      out.push_back(static_cast<char>(std::tolower(static_cast<unsigned char>(c))));
    }
  }
  return out;
}

// 12 significant digits hide the noise of unit conversions (0.05 ns/B
// stored in seconds) so a resolved config reads back unchanged.
std::string FormatDouble(double d) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.12g", d);
  return buf;
}

std::string_view ClassifyName(ClassifyMode m) {
  switch (m) {
    case ClassifyMode::kAuto: return "auto";
    case ClassifyMode::kForceStatic: return "static";
    case ClassifyMode::kForceDynamic: return "dynamic";
  }
  return "?";
}

std::vector<uint64_t> DefaultSweep() {
  std::vector<uint64_t> out;
  for (uint64_t s = kKiB; s <= 64 * kMiB; s *= 4) out.push_back(s);
  return out;
}

uint64_t RoundUp(uint64_t v, uint64_t to) { return (v + to - 1) / to * to; }

SessionOptions BaseOptions(const ScenarioConfig& cfg, TransferMode mode) {
  SessionOptions o;
  o.mode = mode;
  o.classify = cfg.classify;
  o.driver = cfg.driver;
  o.seed = cfg.seed;
  o.fabric.cost = cfg.cost;
  return o;
}

// Pools sized from the largest tensor a server can hold at once, with room
// for staging copies and the RPC ring.
void SizePools(SessionOptions& o, uint64_t pool) {
  pool = RoundUp(pool + 2 * kMiB, kMiB);
  o.arena_bytes = pool;
  o.heap_bytes = pool;
  o.space_bytes = 2 * pool;
}

SessionOptions MicroOptions(const ScenarioConfig& cfg, TransferMode mode, uint64_t bytes) {
  SessionOptions o = BaseOptions(cfg, mode);
  SizePools(o, 3 * (bytes + 1) + (bytes / kFragmentBodyCapacity + 1) * kFragmentSize);
  return o;
}

SessionOptions PsSessionOptions(const ScenarioConfig& cfg, TransferMode mode,
                                const PsWorkload& w) {
  SessionOptions o = BaseOptions(cfg, mode);
  const uint64_t vars = w.variables.size();
  const uint64_t per_var = w.variable_bytes + 1 + kFragmentSize;
  // Variables, gradients from every worker, and the same again for staging,
  // plus one receive ring per RPC edge.
  uint64_t pool = 2 * (cfg.workers + 2) * vars * (per_var + kFragmentSize);
  if (mode == TransferMode::kRpc) pool += cfg.workers * vars * kRingBytes;
  SizePools(o, pool);
  return o;
}

void AppendRow(std::vector<CsvRow>& rows, const ScenarioConfig& cfg,
               std::string scenario, TransferMode mode, const IterationStats& it,
               uint64_t bytes_sent, uint64_t copied, uint64_t peak) {
  CsvRow r;
  r.scenario = std::move(scenario);
  r.mechanism = std::string(TransferModeName(mode));
  r.iteration = it.iteration;
  r.bytes_sent = bytes_sent;
  r.payload_bytes_copied = copied;
  r.arena_peak_bytes = peak;
  r.simulated_time_us = it.simulated_time_us;
  r.wall_time_us = cfg.report_wall_time ? it.wall_time_us : 0;
  rows.push_back(std::move(r));
}

}  // namespace

std::string_view ScenarioName(ScenarioKind k) {
  return k == ScenarioKind::kMicrobench ? "microbench" : "ps_train";
}

const std::vector<Preset>& Presets() {
  static const std::vector<Preset> kPresets = {
      {"alexnet", 176.42, 16, 7.61},   {"inception_v3", 92.90, 196, 68.32},
      {"vggnet16", 512.32, 32, 30.92}, {"lstm", 35.93, 14, 33.33},
      {"gru", 27.92, 11, 30.44},       {"fcn5", 204.47, 10, 4.88},
  };
  return kPresets;
}

int64_t ScenarioConfig::resolved_iterations() const {
  if (iterations > 0) return iterations;
  return scenario == ScenarioKind::kMicrobench ? 3 : 10;
}

ScenarioConfig ParseConfig(std::string_view text) {
  ScenarioConfig cfg;
  std::optional<ScenarioKind> scenario;
  const Preset* preset = nullptr;
  bool model_given = false, vars_given = false, compute_given = false;
  std::set<std::string> seen;

  size_t line_no = 0;
  while (!text.empty()) {
    const size_t nl = text.find('\n');
    std::string_view line = text.substr(0, nl);
    text.remove_prefix(nl == std::string_view::npos ? text.size() : nl + 1);
    ++line_no;
    if (const size_t hash = line.find('#'); hash != std::string_view::npos) {
      line = line.substr(0, hash);
    }
    line = Trim(line);
    if (line.empty()) continue;
    const size_t eq = line.find('=');
    if (eq == std::string_view::npos) {
      Fail(ErrorCode::kBadValue,
           "line " + std::to_string(line_no) + ": expected key = value");
    }
    const std::string_view key = Trim(line.substr(0, eq));
    const std::string_view v = Trim(line.substr(eq + 1));
    if (!seen.insert(std::string(key)).second) BadValue(key, v, "key given twice");
    if (v.empty()) BadValue(key, v, "empty value");

    if (key == "scenario") {
      if (v == "microbench") {
        scenario = ScenarioKind::kMicrobench;
      } else if (v == "ps_train") {
        scenario = ScenarioKind::kPsTrain;
      } else {
        BadValue(key, v, "expected microbench or ps_train");
      }
    } else if (key == "preset") {
      const std::string want = Canonical(v);
      for (const Preset& p : Presets()) {
        if (Canonical(p.name) == want) preset = &p;
      }
      if (!preset) BadValue(key, v, "unknown preset");
      cfg.preset = std::string(preset->name);
    } else if (key == "tensor_bytes") {
      cfg.sizes = {ParseU64(key, v)};
    } else if (key == "sizes") {
      cfg.sizes.clear();
      for (std::string_view s : SplitList(v)) cfg.sizes.push_back(ParseU64(key, s));
    } else if (key == "model_bytes") {
      cfg.model_bytes = ParseU64(key, v);
      model_given = true;
    } else if (key == "num_variables") {
      const uint64_t n = ParseU64(key, v);
      if (n == 0 || n > UINT32_MAX) BadValue(key, v, "out of range");
      cfg.num_variables = static_cast<uint32_t>(n);
      vars_given = true;
    } else if (key == "compute_ms") {
      cfg.compute_ms = ParseDouble(key, v);
      compute_given = true;
    } else if (key == "workers" || key == "ps_shards") {
      const uint64_t n = ParseU64(key, v);
      if (n == 0 || n > 64) BadValue(key, v, "expected 1..64");
      (key == "workers" ? cfg.workers : cfg.ps_shards) = static_cast<uint32_t>(n);
    } else if (key == "classify") {
      if (v == "auto") {
        cfg.classify = ClassifyMode::kAuto;
      } else if (v == "static") {
        cfg.classify = ClassifyMode::kForceStatic;
      } else if (v == "dynamic") {
        cfg.classify = ClassifyMode::kForceDynamic;
      } else {
        BadValue(key, v, "expected auto, static or dynamic");
      }
    } else if (key == "iterations") {
      const uint64_t n = ParseU64(key, v);
      if (n == 0 || n > 1'000'000) BadValue(key, v, "expected 1..1000000");
      cfg.iterations = static_cast<int64_t>(n);
    } else if (key == "mechanism" || key == "mechanisms") {
      cfg.mechanisms.clear();
      for (std::string_view s : SplitList(v)) {
        if (s == "all") {
          cfg.mechanisms = {TransferMode::kZeroCopy, TransferMode::kCopy, TransferMode::kRpc};
          continue;
        }
        auto m = ParseTransferMode(s);
        if (!m) BadValue(key, s, "expected zerocp, cp, rpc or all");
        if (std::find(cfg.mechanisms.begin(), cfg.mechanisms.end(), *m) ==
            cfg.mechanisms.end()) {
          cfg.mechanisms.push_back(*m);
        }
      }
    } else if (key == "seed") {
      cfg.seed = ParseU64(key, v);
    } else if (key == "scale") {
      cfg.scale = ParseFraction(key, v);
    } else if (key == "alpha_us") {
      cfg.cost.alpha = ParseDouble(key, v) * 1e-6;
    } else if (key == "beta_ns_per_byte") {
      cfg.cost.beta = ParseDouble(key, v) * 1e-9;
    } else if (key == "gamma_ns_per_byte") {
      cfg.cost.gamma = ParseDouble(key, v) * 1e-9;
    } else if (key == "driver") {
      if (v == "cooperative") {
        cfg.driver = DriverKind::kCooperative;
      } else if (v == "threaded") {
        cfg.driver = DriverKind::kThreaded;
      } else {
        BadValue(key, v, "expected cooperative or threaded");
      }
    } else if (key == "report_wall_time") {
      cfg.report_wall_time = ParseBool(key, v);
    } else {
      Fail(ErrorCode::kUnknownKey, "line " + std::to_string(line_no) +
                                       ": unknown key '" + std::string(key) + "'");
    }
  }

  if (preset) {
    if (scenario == ScenarioKind::kMicrobench) {
      Fail(ErrorCode::kBadValue, "preset applies to ps_train only");
    }
    scenario = ScenarioKind::kPsTrain;
  }
  cfg.scenario = scenario.value_or(ScenarioKind::kMicrobench);
  if (!(cfg.scale > 0 && cfg.scale <= 1)) {
    BadValue("scale", FormatDouble(cfg.scale), "must lie in (0, 1]");
  }
  if (preset) {
    if (!model_given) {
      cfg.model_bytes = static_cast<uint64_t>(
          std::llround(preset->model_mb * static_cast<double>(kMiB) * cfg.scale));
    }
    if (!vars_given) cfg.num_variables = preset->variables;
    if (!compute_given) cfg.compute_ms = preset->compute_ms;
  }
  if (cfg.sizes.empty()) cfg.sizes = DefaultSweep();
  ValidateConfig(cfg);
  return cfg;
}

void ValidateConfig(const ScenarioConfig& cfg) {
  if (!(cfg.scale > 0 && cfg.scale <= 1)) {
    BadValue("scale", FormatDouble(cfg.scale), "must lie in (0, 1]");
  }
  if (cfg.mechanisms.empty()) BadValue("mechanisms", "", "no mechanism selected");
  for (uint64_t s : cfg.sizes) {
    if (s == 0 || s % 4 != 0) {
      BadValue("sizes", std::to_string(s), "sizes must be positive multiples of 4");
    }
    if (s > 256 * kMiB) BadValue("sizes", std::to_string(s), "larger than 256 MiB");
  }
  if (cfg.compute_ms < 0) BadValue("compute_ms", FormatDouble(cfg.compute_ms), "negative");
  if (cfg.model_bytes == 0) BadValue("model_bytes", "0", "must be positive");
  if (cfg.model_bytes / cfg.num_variables / 4 == 0) {
    BadValue("model_bytes", std::to_string(cfg.model_bytes),
             "too small for " + std::to_string(cfg.num_variables) + " variables");
  }
  if (cfg.model_bytes > 4ull * 1024 * kMiB) {
    BadValue("model_bytes", std::to_string(cfg.model_bytes), "larger than 4 GiB");
  }
  try {
    cfg.cost.Validate();
  } catch (const Error& e) {
    Fail(ErrorCode::kBadValue, e.what());
  }
}

std::vector<std::pair<std::string, std::string>> ResolvedConfig(const ScenarioConfig& cfg) {
  std::vector<std::pair<std::string, std::string>> out;
  out.emplace_back("scenario", std::string(ScenarioName(cfg.scenario)));
  if (cfg.scenario == ScenarioKind::kMicrobench) {
    std::string sizes;
    for (uint64_t s : cfg.sizes) sizes += (sizes.empty() ? "" : ",") + std::to_string(s);
    out.emplace_back("sizes", sizes);
  } else {
    out.emplace_back("preset", cfg.preset.empty() ? "none" : cfg.preset);
    out.emplace_back("scale", FormatDouble(cfg.scale));
    out.emplace_back("model_bytes", std::to_string(cfg.model_bytes));
    out.emplace_back("num_variables", std::to_string(cfg.num_variables));
    out.emplace_back("compute_ms", FormatDouble(cfg.compute_ms));
    out.emplace_back("workers", std::to_string(cfg.workers));
    out.emplace_back("ps_shards", std::to_string(cfg.ps_shards));
    out.emplace_back("classify", std::string(ClassifyName(cfg.classify)));
  }
  out.emplace_back("iterations", std::to_string(cfg.resolved_iterations()));
  std::string mech;
  for (TransferMode m : cfg.mechanisms) {
    mech += (mech.empty() ? "" : ",") + std::string(TransferModeName(m));
  }
  out.emplace_back("mechanisms", mech);
  out.emplace_back("seed", std::to_string(cfg.seed));
  out.emplace_back("alpha_us", FormatDouble(cfg.cost.alpha * 1e6));
  out.emplace_back("beta_ns_per_byte", FormatDouble(cfg.cost.beta * 1e9));
  out.emplace_back("gamma_ns_per_byte", FormatDouble(cfg.cost.gamma * 1e9));
  out.emplace_back("driver", cfg.driver == DriverKind::kCooperative ? "cooperative" : "threaded");
  out.emplace_back("report_wall_time", cfg.report_wall_time ? "true" : "false");
  return out;
}

DataFlowGraph MicrobenchGraph(uint64_t bytes, Placement* placement) {
  DataFlowGraph g;
  NodeId x = g.AddInput("tensor", TensorShape::Static({bytes / 4}));
  NodeId r = g.AddOp(NodeKind::kReduceMax, "reduce_max", {x});
  *placement = {{x, 0}, {r, 1}};
  return g;
}

PsWorkloadOptions PsOptions(const ScenarioConfig& cfg) {
  PsWorkloadOptions o;
  o.model_bytes = cfg.model_bytes;
  o.num_variables = cfg.num_variables;
  o.compute_time = cfg.compute_ms * 1e-3;
  o.workers = cfg.workers;
  o.ps_shards = cfg.ps_shards;
  return o;
}

std::vector<CsvRow> RunMicrobench(const ScenarioConfig& cfg) {
  std::vector<CsvRow> rows;
  const int64_t n = cfg.resolved_iterations();
  for (uint64_t bytes : cfg.sizes) {
    Placement pl;
    DataFlowGraph g = MicrobenchGraph(bytes, &pl);
    for (TransferMode mode : cfg.mechanisms) {
      Session s(g, pl, StaticAnnotations(g), MicroOptions(cfg, mode, bytes));
      RunReport r = s.Run(n);
      // Steady state: the last iteration, after tracing has settled.
      const IterationStats& last = r.iterations.back();
      AppendRow(rows, cfg, "microbench", mode, last, last.bytes_sent(),
                last.payload_bytes_copied(), last.arena_peak_bytes());
    }
  }
  return rows;
}

std::vector<CsvRow> RunPs(const ScenarioConfig& cfg) {
  std::vector<CsvRow> rows;
  PsWorkload w = BuildPsWorkload(PsOptions(cfg));
  for (TransferMode mode : cfg.mechanisms) {
    Session s(w.graph, w.placement, StaticAnnotations(w.graph),
              PsSessionOptions(cfg, mode, w));
    RunReport r = s.Run(cfg.resolved_iterations());
    for (const IterationStats& it : r.iterations) {
      AppendRow(rows, cfg, "ps_train", mode, it, it.bytes_sent(),
                it.payload_bytes_copied(), it.arena_peak_bytes());
      for (const ServerIterationStats& sv : it.servers) {
        AppendRow(rows, cfg, "ps_train@s" + std::to_string(sv.server), mode, it,
                  sv.bytes_sent, sv.payload_bytes_copied, sv.arena_peak_bytes);
      }
    }
  }
  return rows;
}

std::vector<CsvRow> RunScenario(const ScenarioConfig& cfg) {
  ValidateConfig(cfg);
  return cfg.scenario == ScenarioKind::kMicrobench ? RunMicrobench(cfg) : RunPs(cfg);
}

std::string DumpPlans(const ScenarioConfig& cfg) {
  ValidateConfig(cfg);
  std::ostringstream os;
  auto dump = [&](const std::string& title, const Session& s) {
    os << "## " << title << " mechanism=" << TransferModeName(s.options().mode) << "\n";
    os << s.plan().Dump();
  };
  if (cfg.scenario == ScenarioKind::kMicrobench) {
    for (uint64_t bytes : cfg.sizes) {
      Placement pl;
      DataFlowGraph g = MicrobenchGraph(bytes, &pl);
      for (TransferMode mode : cfg.mechanisms) {
        Session s(g, pl, StaticAnnotations(g), MicroOptions(cfg, mode, bytes));
        dump("microbench bytes=" + std::to_string(bytes), s);
      }
    }
  } else {
    PsWorkload w = BuildPsWorkload(PsOptions(cfg));
    for (TransferMode mode : cfg.mechanisms) {
      Session s(w.graph, w.placement, StaticAnnotations(w.graph),
                PsSessionOptions(cfg, mode, w));
      dump("ps_train", s);
    }
  }
  return os.str();
}

void WriteScenarioCsv(std::ostream& os, const ScenarioConfig& cfg,
                      const std::vector<CsvRow>& rows) {
  WriteCsv(os, ResolvedConfig(cfg), rows);
}

}  // namespace rdmaflow::bench
