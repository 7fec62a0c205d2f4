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

// Dataflow graph model: shapes with possibly-unknown dims, operator nodes,
// forward shape inference, partitioning across servers with communication
// node pairs, and the synthetic parameter-server workload.

#ifndef RDMAFLOW_GRAPH_H_
#define RDMAFLOW_GRAPH_H_

#include <cstdint>
#include <initializer_list>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "rdmaflow/memspace.h"
#include "rdmaflow/wire.h"

namespace rdmaflow {

using NodeId = uint32_t;
using EdgeId = uint32_t;

class Dim {
 public:
  static Dim Known(uint64_t n) { return Dim(true, n); }
  static Dim Unknown() { return Dim(false, 0); }

  bool known() const { return known_; }
  uint64_t value() const;  // InvalidGraph when unknown
  bool operator==(const Dim&) const = default;

 private:
  Dim(bool known, uint64_t v) : known_(known), value_(v) {}
  bool known_;
  uint64_t value_;
};

class TensorShape {
 public:
  TensorShape() = default;
  explicit TensorShape(std::vector<Dim> dims) : dims_(std::move(dims)) {}
  static TensorShape Static(std::vector<uint64_t> dims);
  static TensorShape Static(std::initializer_list<uint64_t> dims) {
    return Static(std::vector<uint64_t>(dims));
  }

  size_t rank() const { return dims_.size(); }
  const Dim& dim(size_t i) const { return dims_.at(i); }
  const std::vector<Dim>& dims() const { return dims_; }
  bool FullyStatic() const;
  std::vector<uint64_t> StaticDims() const;  // InvalidGraph unless static
  std::string ToString() const;              // e.g. "[2,?,4]"
  bool operator==(const TensorShape&) const = default;

 private:
  std::vector<Dim> dims_;
};

enum class NodeKind : uint8_t {
  kInput,
  kVariable,
  kMatMul,
  kAdd,
  kSigmoid,
  kReduceMax,
  kApplyGrad,
  kInPlaceScale,
  kConcatDyn,
  kGenGrad,
  // Placeholders produced by partitioning before mechanisms are chosen.
  kSend,
  kRecv,
  kRdmaSend,
  kRdmaRecv,
  kRdmaSendDyn,
  kRdmaRecvDyn,
  kRpcSend,
  kRpcRecv,
};

std::string_view NodeKindName(NodeKind k);
bool IsCommKind(NodeKind k);
bool IsSendKind(NodeKind k);
bool IsRecvKind(NodeKind k);
// Kinds whose output aliases their first input's buffer.
bool IsInPlaceKind(NodeKind k);

enum class ExecMode : uint8_t { kSync, kAsync, kPollingAsync };
std::string_view ExecModeName(ExecMode m);
ExecMode DefaultExecMode(NodeKind k);

struct NodeAttrs {
  // Input: shape produced at run time. Variable: its (static) shape.
  TensorShape shape;
  ElemType elem_type = ElemType::kF32;
  // InPlaceScale factor; ApplyGrad learning rate; GenGrad input weight.
  float scale = 1.0f;
  // ConcatDyn: output rows drawn per iteration from [min_rows, max_rows].
  uint64_t min_rows = 1;
  uint64_t max_rows = 1;
  // Simulated compute time of one execution, seconds.
  double compute_time = 0;
  // Communication nodes: the partner node and the cross-edge index.
  NodeId peer = 0;
  uint32_t cross_index = 0;
};

struct Node {
  NodeId id = 0;
  NodeKind kind = NodeKind::kInput;
  std::string name;
  std::vector<EdgeId> inputs;   // by input port
  std::vector<EdgeId> outputs;  // consumers of the single output
  ServerId placement = 0;
  ExecMode exec_mode = ExecMode::kSync;
  NodeAttrs attrs;
};

struct Edge {
  EdgeId id = 0;
  NodeId src = 0;
  NodeId dst = 0;
  uint32_t dst_port = 0;
};

class DataFlowGraph {
 public:
  NodeId AddInput(std::string name, TensorShape runtime_shape,
                  ElemType t = ElemType::kF32);
  NodeId AddVariable(std::string name, TensorShape shape,
                     ElemType t = ElemType::kF32);
  // Compute kinds only. Communication kinds are created by Partition().
  NodeId AddOp(NodeKind kind, std::string name, std::vector<NodeId> inputs,
               NodeAttrs attrs = {});

  const Node& node(NodeId id) const { return nodes_.at(id); }
  Node& mutable_node(NodeId id) { return nodes_.at(id); }
  const Edge& edge(EdgeId id) const { return edges_.at(id); }
  const std::vector<Node>& nodes() const { return nodes_; }
  const std::vector<Edge>& edges() const { return edges_; }
  size_t num_nodes() const { return nodes_.size(); }
  size_t num_edges() const { return edges_.size(); }

  // Kahn order; Recv nodes follow their Send partner. InvalidGraph on cycles.
  std::vector<NodeId> TopologicalOrder() const;
  // Arity, fan-out and structural checks. Throws InvalidGraph.
  void Validate() const;

 private:
  friend struct PartitionAccess;
  NodeId AddNode(NodeKind kind, std::string name, NodeAttrs attrs);
  EdgeId Connect(NodeId src, NodeId dst, uint32_t dst_port);

  std::vector<Node> nodes_;
  std::vector<Edge> edges_;
};

// Shape and element type of every edge.
class ShapeMap {
 public:
  const TensorShape& shape(EdgeId e) const { return shapes_.at(e); }
  ElemType elem_type(EdgeId e) const { return types_.at(e); }
  size_t size() const { return shapes_.size(); }
  void Set(EdgeId e, TensorShape s, ElemType t);

 private:
  std::vector<TensorShape> shapes_;
  std::vector<ElemType> types_;
};

using Annotations = std::map<NodeId, TensorShape>;
// Annotates every Input with its full runtime shape.
Annotations StaticAnnotations(const DataFlowGraph& g);

// Single forward pass in topological order. Throws ShapeMismatch,
// MissingAnnotation, BadElemType.
ShapeMap InferShapes(const DataFlowGraph& g, const Annotations& annotations);

// Output shape of one node given its input shapes (exposed for tests).
TensorShape InferNodeShape(const Node& n, const std::vector<TensorShape>& in);

struct CrossEdge {
  EdgeId edge = 0;       // producer -> send (keeps the original edge id)
  EdgeId recv_edge = 0;  // recv -> consumer
  NodeId producer = 0;
  NodeId consumer = 0;
  NodeId send_node = 0;
  NodeId recv_node = 0;
  ServerId producer_server = 0;
  ServerId consumer_server = 0;
};

using Placement = std::map<NodeId, ServerId>;

struct PartitionResult {
  DataFlowGraph graph;
  std::vector<CrossEdge> cross_edges;
  std::map<ServerId, std::vector<NodeId>> server_nodes;
  // Edge of the partitioned graph -> edge of the input graph it carries.
  std::vector<EdgeId> origin_edge;
};

// Splits every edge whose endpoints sit on different servers into a
// Send/Recv placeholder pair. Node and edge ids of the input graph are kept.
// Throws InvalidConfig when the placement misses a node.
PartitionResult Partition(const DataFlowGraph& g, const Placement& placement);

// Picks the concrete communication kinds of one cross edge.
enum class TransferKind : uint8_t { kRdmaStatic, kRdmaDynamic, kRpc };
void SetTransferKind(PartitionResult& p, size_t cross_index, TransferKind kind);

struct PsWorkload {
  DataFlowGraph graph;
  Placement placement;
  std::vector<NodeId> variables;
  std::vector<ServerId> worker_servers;
  std::vector<ServerId> ps_servers;
  uint64_t variable_bytes = 0;  // per variable
};

struct PsWorkloadOptions {
  uint64_t model_bytes = 0;
  uint32_t num_variables = 1;
  double compute_time = 0;  // per iteration, seconds
  uint32_t workers = 1;
  uint32_t ps_shards = 1;
  float learning_rate = 0.01f;
};

// Variables are equal 1-D F32 slabs of floor(model / V / 4) elements placed
// round-robin over the PS shards. Each worker runs one GenGrad per variable;
// one ApplyGrad per variable consumes every worker's gradient. Workers take
// server ids 0..K-1 and PS shards follow.
PsWorkload BuildPsWorkload(const PsWorkloadOptions& options);

}  // namespace rdmaflow

#endif  // RDMAFLOW_GRAPH_H_
