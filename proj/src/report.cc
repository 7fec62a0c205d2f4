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

#include <cstdio>
#include <sstream>

#include "rdmaflow/errors.h"
#include "rdmaflow/runtime.h"

namespace rdmaflow {

uint64_t IterationStats::bytes_sent() const {
  uint64_t n = 0;
  for (const auto& s : servers) n += s.bytes_sent;
  return n;
}

uint64_t IterationStats::payload_bytes_copied() const {
  uint64_t n = 0;
  for (const auto& s : servers) n += s.payload_bytes_copied;
  return n;
}

uint64_t IterationStats::serialize_bytes() const {
  uint64_t n = 0;
  for (const auto& s : servers) n += s.serialize_bytes;
  return n;
}

uint64_t IterationStats::arena_peak_bytes() const {
  uint64_t n = 0;
  for (const auto& s : servers) n = std::max(n, s.arena_peak_bytes);
  return n;
}

uint64_t IterationStats::soundness_violations() const {
  uint64_t n = 0;
  for (const auto& s : servers) n += s.soundness_violations;
  return n;
}

const ServerIterationStats& IterationStats::server(ServerId id) const {
  for (const auto& s : servers) {
    if (s.server == id) return s;
  }
  Fail(ErrorCode::kInvalidConfig, "no stats for server " + std::to_string(id));
}

uint64_t RunReport::total_bytes_sent() const {
  uint64_t n = 0;
  for (const auto& it : iterations) n += it.bytes_sent();
  return n;
}

uint64_t RunReport::total_payload_bytes_copied() const {
  uint64_t n = 0;
  for (const auto& it : iterations) n += it.payload_bytes_copied();
  return n;
}

uint64_t RunReport::total_soundness_violations() const {
  uint64_t n = 0;
  for (const auto& it : iterations) n += it.soundness_violations();
  return n;
}

std::string RunReport::Fingerprint(bool with_arena_peaks) const {
  std::ostringstream os;
  os.precision(17);
  for (const auto& it : iterations) {
    os << "it " << it.iteration << " sim " << it.simulated_time_us << "\n";
    for (const auto& s : it.servers) {
      os << " s" << s.server << " tx " << s.transfers << " bytes " << s.bytes_sent
         << " wire " << s.wire_bytes << " w " << s.writes_posted << " r "
         << s.reads_posted << " snd " << s.sends_posted << " cp "
         << s.payload_bytes_copied << "/" << s.payload_copy_events << " ser "
         << s.serialize_bytes << " recv " << s.recv_resident_start << "/"
         << s.recv_resident_end << " viol " << s.soundness_violations << " sim "
         << s.simulated_time_us;
      if (with_arena_peaks) {
        os << " arena " << s.arena_resident_start << "/" << s.arena_resident_end
           << "/" << s.arena_peak_bytes << " recvpk " << s.recv_resident_peak;
      }
      os << "\n";
    }
  }
  for (const auto& [e, b] : edge_bytes) os << "e" << e << " " << b << "\n";
  os << "reloc " << relocation_bytes << "\n";
  return os.str();
}

void EdgeCapture::Record(int64_t iteration, EdgeId edge, const Tensor& t) {
  Value v{t.dims, t.elem_type, t.CopyOut()};
  std::lock_guard<std::mutex> lock(mu_);
  values_[{iteration, edge}] = std::move(v);
}

const EdgeCapture::Value* EdgeCapture::Get(int64_t iteration, EdgeId edge) const {
  std::lock_guard<std::mutex> lock(mu_);
  auto it = values_.find({iteration, edge});
  return it == values_.end() ? nullptr : &it->second;
}

size_t EdgeCapture::size() const {
  std::lock_guard<std::mutex> lock(mu_);
  return values_.size();
}

void WriteCsv(std::ostream& os,
              const std::vector<std::pair<std::string, std::string>>& config,
              const std::vector<CsvRow>& rows) {
  for (const auto& [k, v] : config) os << "# " << k << " = " << v << "\n";
  os << kCsvHeader << "\n";
  char num[64];
  for (const CsvRow& r : rows) {
    os << r.scenario << ',' << r.mechanism << ',' << r.iteration << ','
       << r.bytes_sent << ',' << r.payload_bytes_copied << ',' << r.arena_peak_bytes
       << ',';
    std::snprintf(num, sizeof num, "%.3f", r.simulated_time_us);
    os << num << ',';
    std::snprintf(num, sizeof num, "%.3f", r.wall_time_us);
    os << num << "\n";
  }
}

}  // namespace rdmaflow
