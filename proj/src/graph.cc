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

#include "rdmaflow/graph.h"

#include <algorithm>
#include <queue>
#include <set>

#include "rdmaflow/errors.h"

namespace rdmaflow {

uint64_t Dim::value() const {
  if (!known_) Fail(ErrorCode::kInvalidGraph, "value of an unknown dim");
  return value_;
}

TensorShape TensorShape::Static(std::vector<uint64_t> dims) {
  std::vector<Dim> out;
  out.reserve(dims.size());
  for (uint64_t d : dims) out.push_back(Dim::Known(d));
  return TensorShape(std::move(out));
}

bool TensorShape::FullyStatic() const {
  return std::all_of(dims_.begin(), dims_.end(),
                     [](const Dim& d) { return d.known(); });
}

std::vector<uint64_t> TensorShape::StaticDims() const {
  std::vector<uint64_t> out;
  out.reserve(dims_.size());
  for (const Dim& d : dims_) out.push_back(d.value());
  return out;
}

std::string TensorShape::ToString() const {
  std::string s = "[";
  for (size_t i = 0; i < dims_.size(); ++i) {
    if (i) s += ",";
    s += dims_[i].known() ? std::to_string(dims_[i].value()) : "?";
  }
  return s + "]";
}

std::string_view NodeKindName(NodeKind k) {
  switch (k) {
    case NodeKind::kInput: return "Input";
    case NodeKind::kVariable: return "Variable";
    case NodeKind::kMatMul: return "MatMul";
    case NodeKind::kAdd: return "Add";
    case NodeKind::kSigmoid: return "Sigmoid";
    case NodeKind::kReduceMax: return "ReduceMax";
    case NodeKind::kApplyGrad: return "ApplyGrad";
    case NodeKind::kInPlaceScale: return "InPlaceScale";
    case NodeKind::kConcatDyn: return "ConcatDyn";
    case NodeKind::kGenGrad: return "GenGrad";
    case NodeKind::kSend: return "Send";
    case NodeKind::kRecv: return "Recv";
    case NodeKind::kRdmaSend: return "RdmaSend";
    case NodeKind::kRdmaRecv: return "RdmaRecv";
    case NodeKind::kRdmaSendDyn: return "RdmaSendDyn";
    case NodeKind::kRdmaRecvDyn: return "RdmaRecvDyn";
    case NodeKind::kRpcSend: return "RpcSend";
    case NodeKind::kRpcRecv: return "RpcRecv";
  }
  return "?";
}

bool IsSendKind(NodeKind k) {
  return k == NodeKind::kSend || k == NodeKind::kRdmaSend ||
         k == NodeKind::kRdmaSendDyn || k == NodeKind::kRpcSend;
}

bool IsRecvKind(NodeKind k) {
  return k == NodeKind::kRecv || k == NodeKind::kRdmaRecv ||
         k == NodeKind::kRdmaRecvDyn || k == NodeKind::kRpcRecv;
}

bool IsCommKind(NodeKind k) { return IsSendKind(k) || IsRecvKind(k); }

bool IsInPlaceKind(NodeKind k) {
  return k == NodeKind::kApplyGrad || k == NodeKind::kInPlaceScale;
}

std::string_view ExecModeName(ExecMode m) {
  switch (m) {
    case ExecMode::kSync: return "sync";
    case ExecMode::kAsync: return "async";
    case ExecMode::kPollingAsync: return "polling-async";
  }
  return "?";
}

ExecMode DefaultExecMode(NodeKind k) {
  if (IsSendKind(k)) return ExecMode::kAsync;
  if (IsRecvKind(k)) return ExecMode::kPollingAsync;
  return ExecMode::kSync;
}

// ---------------------------------------------------------------------------
// DataFlowGraph

NodeId DataFlowGraph::AddNode(NodeKind kind, std::string name, NodeAttrs attrs) {
  Node n;
  n.id = static_cast<NodeId>(nodes_.size());
  n.kind = kind;
  n.name = std::move(name);
  n.exec_mode = DefaultExecMode(kind);
  n.attrs = std::move(attrs);
  nodes_.push_back(std::move(n));
  return nodes_.back().id;
}

EdgeId DataFlowGraph::Connect(NodeId src, NodeId dst, uint32_t dst_port) {
  if (src >= nodes_.size() || dst >= nodes_.size()) {
    Fail(ErrorCode::kInvalidGraph, "edge references a missing node");
  }
  Edge e{static_cast<EdgeId>(edges_.size()), src, dst, dst_port};
  edges_.push_back(e);
  nodes_[src].outputs.push_back(e.id);
  auto& in = nodes_[dst].inputs;
  if (in.size() <= dst_port) in.resize(dst_port + 1);
  in[dst_port] = e.id;
  return e.id;
}

NodeId DataFlowGraph::AddInput(std::string name, TensorShape runtime_shape,
                               ElemType t) {
  if (!runtime_shape.FullyStatic()) {
    Fail(ErrorCode::kInvalidGraph, "input runtime shape must be concrete");
  }
  NodeAttrs a;
  a.shape = std::move(runtime_shape);
  a.elem_type = t;
  return AddNode(NodeKind::kInput, std::move(name), std::move(a));
}

NodeId DataFlowGraph::AddVariable(std::string name, TensorShape shape,
                                  ElemType t) {
  if (!shape.FullyStatic() || shape.rank() == 0) {
    Fail(ErrorCode::kInvalidGraph, "variable shape must be static, rank >= 1");
  }
  NodeAttrs a;
  a.shape = std::move(shape);
  a.elem_type = t;
  return AddNode(NodeKind::kVariable, std::move(name), std::move(a));
}

NodeId DataFlowGraph::AddOp(NodeKind kind, std::string name,
                            std::vector<NodeId> inputs, NodeAttrs attrs) {
  if (IsCommKind(kind) || kind == NodeKind::kInput ||
      kind == NodeKind::kVariable) {
    Fail(ErrorCode::kInvalidGraph,
         std::string(NodeKindName(kind)) + " cannot be added with AddOp");
  }
  for (NodeId in : inputs) {
    if (in >= nodes_.size()) Fail(ErrorCode::kInvalidGraph, "missing input node");
    if (IsSendKind(nodes_[in].kind)) {
      Fail(ErrorCode::kInvalidGraph, "send nodes have no output");
    }
  }
  NodeId id = AddNode(kind, std::move(name), std::move(attrs));
  for (uint32_t port = 0; port < inputs.size(); ++port) {
    Connect(inputs[port], id, port);
  }
  return id;
}

std::vector<NodeId> DataFlowGraph::TopologicalOrder() const {
  std::vector<uint32_t> pending(nodes_.size(), 0);
  std::vector<std::vector<NodeId>> succ(nodes_.size());
  for (const Edge& e : edges_) {
    ++pending[e.dst];
    succ[e.src].push_back(e.dst);
  }
  for (const Node& n : nodes_) {
    if (IsSendKind(n.kind) && n.attrs.peer < nodes_.size() &&
        IsRecvKind(nodes_[n.attrs.peer].kind)) {
      ++pending[n.attrs.peer];
      succ[n.id].push_back(n.attrs.peer);
    }
  }
  std::priority_queue<NodeId, std::vector<NodeId>, std::greater<>> ready;
  for (NodeId i = 0; i < nodes_.size(); ++i) {
    if (pending[i] == 0) ready.push(i);
  }
  std::vector<NodeId> order;
  order.reserve(nodes_.size());
  while (!ready.empty()) {
    NodeId n = ready.top();
    ready.pop();
    order.push_back(n);
    for (NodeId s : succ[n]) {
      if (--pending[s] == 0) ready.push(s);
    }
  }
  if (order.size() != nodes_.size()) {
    Fail(ErrorCode::kInvalidGraph, "graph has a cycle");
  }
  return order;
}

namespace {

void CheckArity(const Node& n) {
  const size_t k = n.inputs.size();
  bool ok = true;
  switch (n.kind) {
    case NodeKind::kInput:
    case NodeKind::kVariable:
      ok = k == 0;
      break;
    case NodeKind::kMatMul:
    case NodeKind::kAdd:
      ok = k == 2;
      break;
    case NodeKind::kSigmoid:
    case NodeKind::kReduceMax:
    case NodeKind::kInPlaceScale:
    case NodeKind::kGenGrad:
      ok = k == 1;
      break;
    case NodeKind::kApplyGrad:
      ok = k >= 2;
      break;
    case NodeKind::kConcatDyn:
      ok = k >= 1 && n.attrs.min_rows <= n.attrs.max_rows;
      break;
    default:
      ok = IsSendKind(n.kind) ? k == 1 && n.outputs.empty() : k == 0;
  }
  if (!ok) {
    Fail(ErrorCode::kInvalidGraph, "node " + n.name + " (" +
                                       std::string(NodeKindName(n.kind)) +
                                       ") has a bad input/attribute set");
  }
}

}  // namespace

void DataFlowGraph::Validate() const {
  for (const Node& n : nodes_) CheckArity(n);
  TopologicalOrder();

  // Ancestors of a node, for the ApplyGrad ordering rule.
  auto ancestors = [this](NodeId root) {
    std::vector<bool> seen(nodes_.size(), false);
    std::vector<NodeId> stack{root};
    while (!stack.empty()) {
      NodeId n = stack.back();
      stack.pop_back();
      for (EdgeId e : nodes_[n].inputs) {
        NodeId src = edges_[e].src;
        if (!seen[src]) {
          seen[src] = true;
          stack.push_back(src);
        }
      }
      const Node& node = nodes_[n];
      if (IsRecvKind(node.kind) && !seen[node.attrs.peer]) {
        seen[node.attrs.peer] = true;
        stack.push_back(node.attrs.peer);
      }
    }
    return seen;
  };

  std::set<NodeId> updated_vars;
  for (const Node& n : nodes_) {
    if (n.kind == NodeKind::kInPlaceScale) {
      const Node& src = nodes_[edges_[n.inputs[0]].src];
      if (src.outputs.size() != 1) {
        Fail(ErrorCode::kInvalidGraph,
             "in-place node " + n.name + " needs an exclusive input");
      }
    }
    if (n.kind == NodeKind::kApplyGrad) {
      const Node& var = nodes_[edges_[n.inputs[0]].src];
      if (var.kind != NodeKind::kVariable) {
        Fail(ErrorCode::kInvalidGraph,
             "ApplyGrad " + n.name + " must take a Variable as input 0");
      }
      if (!updated_vars.insert(var.id).second) {
        Fail(ErrorCode::kInvalidGraph,
             "variable " + var.name + " has more than one ApplyGrad");
      }
      // Every other reader of the variable must finish before the update.
      std::vector<bool> before = ancestors(n.id);
      for (EdgeId e : var.outputs) {
        NodeId reader = edges_[e].dst;
        if (reader != n.id && !before[reader]) {
          Fail(ErrorCode::kInvalidGraph,
               "reader " + nodes_[reader].name + " of variable " + var.name +
                   " is not ordered before its ApplyGrad");
        }
      }
    }
  }
}

// ---------------------------------------------------------------------------
// Shapes

void ShapeMap::Set(EdgeId e, TensorShape s, ElemType t) {
  if (shapes_.size() <= e) {
    shapes_.resize(e + 1);
    types_.resize(e + 1, ElemType::kF32);
  }
  shapes_[e] = std::move(s);
  types_[e] = t;
}

Annotations StaticAnnotations(const DataFlowGraph& g) {
  Annotations a;
  for (const Node& n : g.nodes()) {
    if (n.kind == NodeKind::kInput) a[n.id] = n.attrs.shape;
  }
  return a;
}

namespace {

[[noreturn]] void Mismatch(const Node& n, const std::string& why) {
  Fail(ErrorCode::kShapeMismatch, std::string(NodeKindName(n.kind)) + " " +
                                      n.name + ": " + why);
}

// Both known and different is a conflict; anything else is compatible.
bool Conflicts(const Dim& a, const Dim& b) {
  return a.known() && b.known() && a.value() != b.value();
}

}  // namespace

TensorShape InferNodeShape(const Node& n, const std::vector<TensorShape>& in) {
  switch (n.kind) {
    case NodeKind::kVariable:
      return n.attrs.shape;
    case NodeKind::kMatMul: {
      const TensorShape& a = in[0];
      const TensorShape& b = in[1];
      if (a.rank() != 2 || b.rank() != 2) Mismatch(n, "operands must be rank 2");
      if (Conflicts(a.dim(1), b.dim(0))) {
        Mismatch(n, "inner dims " + a.ToString() + " x " + b.ToString());
      }
      return TensorShape({a.dim(0), b.dim(1)});
    }
    case NodeKind::kAdd: {
      const TensorShape& a = in[0];
      const TensorShape& b = in[1];
      if (a.rank() != b.rank()) Mismatch(n, "rank differs");
      std::vector<Dim> out;
      for (size_t i = 0; i < a.rank(); ++i) {
        const Dim& x = a.dim(i);
        const Dim& y = b.dim(i);
        // The second operand broadcasts along dims where it is 1.
        if (y.known() && y.value() == 1) {
          out.push_back(x);
        } else if (Conflicts(x, y)) {
          Mismatch(n, a.ToString() + " + " + b.ToString());
        } else {
          out.push_back(x.known() ? x : y);
        }
      }
      return TensorShape(std::move(out));
    }
    case NodeKind::kSigmoid:
    case NodeKind::kInPlaceScale:
    case NodeKind::kGenGrad:
      return in[0];
    case NodeKind::kReduceMax:
      return TensorShape::Static({1});
    case NodeKind::kApplyGrad: {
      const TensorShape& var = in[0];
      for (size_t i = 1; i < in.size(); ++i) {
        if (in[i].rank() != var.rank()) Mismatch(n, "gradient rank differs");
        for (size_t d = 0; d < var.rank(); ++d) {
          if (Conflicts(var.dim(d), in[i].dim(d))) {
            Mismatch(n, "gradient " + in[i].ToString() + " vs variable " +
                            var.ToString());
          }
        }
      }
      return var;
    }
    case NodeKind::kConcatDyn: {
      const TensorShape& first = in[0];
      if (first.rank() == 0) Mismatch(n, "rank 0 input");
      std::vector<Dim> out{Dim::Unknown()};
      for (size_t d = 1; d < first.rank(); ++d) {
        Dim merged = first.dim(d);
        for (const TensorShape& s : in) {
          if (s.rank() != first.rank()) Mismatch(n, "rank differs");
          if (Conflicts(merged, s.dim(d))) Mismatch(n, "trailing dims differ");
          if (!merged.known()) merged = s.dim(d);
        }
        out.push_back(merged);
      }
      return TensorShape(std::move(out));
    }
    default:
      if (!in.empty()) return in[0];
      Fail(ErrorCode::kInvalidGraph,
           "no shape rule for " + std::string(NodeKindName(n.kind)));
  }
}

ShapeMap InferShapes(const DataFlowGraph& g, const Annotations& annotations) {
  g.Validate();
  std::vector<TensorShape> out_shape(g.num_nodes());
  std::vector<ElemType> out_type(g.num_nodes(), ElemType::kF32);
  ShapeMap shapes;
  for (NodeId id : g.TopologicalOrder()) {
    const Node& n = g.node(id);
    std::vector<TensorShape> in;
    std::vector<ElemType> in_types;
    for (EdgeId e : n.inputs) {
      in.push_back(out_shape[g.edge(e).src]);
      in_types.push_back(out_type[g.edge(e).src]);
    }
    TensorShape s;
    ElemType t = ElemType::kF32;
    if (n.kind == NodeKind::kInput) {
      auto it = annotations.find(id);
      if (it == annotations.end()) {
        Fail(ErrorCode::kMissingAnnotation, "input " + n.name + " is not annotated");
      }
      if (it->second.rank() != n.attrs.shape.rank()) {
        Fail(ErrorCode::kShapeMismatch, "annotation rank for " + n.name +
                                            " differs from its runtime rank");
      }
      s = it->second;
      t = n.attrs.elem_type;
    } else if (n.kind == NodeKind::kVariable) {
      s = n.attrs.shape;
      t = n.attrs.elem_type;
    } else if (IsRecvKind(n.kind)) {
      s = out_shape[n.attrs.peer];
      t = out_type[n.attrs.peer];
    } else {
      s = InferNodeShape(n, in);
      if (!in_types.empty()) t = in_types[0];
      for (ElemType it : in_types) {
        if (it != t) Mismatch(n, "mixed element types");
      }
      const bool arithmetic = n.kind != NodeKind::kConcatDyn && !IsSendKind(n.kind);
      if (arithmetic && t != ElemType::kF32) {
        Fail(ErrorCode::kBadElemType,
             n.name + ": arithmetic kinds take F32 only");
      }
    }
    // A send's recorded output is what its partner recv will produce.
    out_shape[id] = s;
    out_type[id] = t;
  }
  for (const Edge& e : g.edges()) {
    shapes.Set(e.id, out_shape[e.src], out_type[e.src]);
  }
  return shapes;
}

// ---------------------------------------------------------------------------
// Partitioning

struct PartitionAccess {
  static NodeId AddNode(DataFlowGraph& g, NodeKind k, std::string name,
                        NodeAttrs a) {
    return g.AddNode(k, std::move(name), std::move(a));
  }
  static Edge& MutableEdge(DataFlowGraph& g, EdgeId e) { return g.edges_[e]; }
  static EdgeId AppendEdge(DataFlowGraph& g, NodeId src, NodeId dst,
                           uint32_t port) {
    Edge e{static_cast<EdgeId>(g.edges_.size()), src, dst, port};
    g.edges_.push_back(e);
    g.nodes_[src].outputs.push_back(e.id);
    g.nodes_[dst].inputs[port] = e.id;
    return e.id;
  }
  static void SetInputs(DataFlowGraph& g, NodeId n, std::vector<EdgeId> in) {
    g.nodes_[n].inputs = std::move(in);
  }
};

PartitionResult Partition(const DataFlowGraph& g, const Placement& placement) {
  g.Validate();
  PartitionResult r;
  r.graph = g;
  DataFlowGraph& pg = r.graph;
  for (const Node& n : g.nodes()) {
    auto it = placement.find(n.id);
    if (it == placement.end()) {
      Fail(ErrorCode::kInvalidConfig, "node " + n.name + " has no placement");
    }
    pg.mutable_node(n.id).placement = it->second;
  }
  // ApplyGrad writes into the variable's own buffer; across servers it would
  // only update the received copy.
  for (const Node& n : g.nodes()) {
    if (n.kind != NodeKind::kApplyGrad) continue;
    const Node& var = g.node(g.edge(n.inputs[0]).src);
    if (placement.at(var.id) != placement.at(n.id)) {
      Fail(ErrorCode::kInvalidConfig,
           "ApplyGrad " + n.name + " is not on the server of variable " + var.name);
    }
  }
  r.origin_edge.resize(g.num_edges());
  for (EdgeId e = 0; e < g.num_edges(); ++e) r.origin_edge[e] = e;

  for (EdgeId e = 0; e < g.num_edges(); ++e) {
    const Edge orig = g.edge(e);
    const ServerId ps = placement.at(orig.src);
    const ServerId cs = placement.at(orig.dst);
    if (ps == cs) continue;
    CrossEdge ce;
    ce.edge = e;
    ce.producer = orig.src;
    ce.consumer = orig.dst;
    ce.producer_server = ps;
    ce.consumer_server = cs;
    const auto index = static_cast<uint32_t>(r.cross_edges.size());
    NodeAttrs sa;
    sa.cross_index = index;
    ce.send_node = PartitionAccess::AddNode(pg, NodeKind::kSend,
                                            "send/e" + std::to_string(e), sa);
    ce.recv_node = PartitionAccess::AddNode(pg, NodeKind::kRecv,
                                            "recv/e" + std::to_string(e), sa);
    pg.mutable_node(ce.send_node).attrs.peer = ce.recv_node;
    pg.mutable_node(ce.recv_node).attrs.peer = ce.send_node;
    pg.mutable_node(ce.send_node).placement = ps;
    pg.mutable_node(ce.recv_node).placement = cs;

    // Re-point the original edge at the send node.
    Edge& pe = PartitionAccess::MutableEdge(pg, e);
    pe.dst = ce.send_node;
    pe.dst_port = 0;
    PartitionAccess::SetInputs(pg, ce.send_node, {e});
    ce.recv_edge = PartitionAccess::AppendEdge(pg, ce.recv_node, orig.dst,
                                               orig.dst_port);
    r.origin_edge.push_back(e);
    r.cross_edges.push_back(ce);
  }
  for (const Node& n : pg.nodes()) r.server_nodes[n.placement].push_back(n.id);
  return r;
}

void SetTransferKind(PartitionResult& p, size_t cross_index, TransferKind kind) {
  const CrossEdge& ce = p.cross_edges.at(cross_index);
  Node& s = p.graph.mutable_node(ce.send_node);
  Node& r = p.graph.mutable_node(ce.recv_node);
  switch (kind) {
    case TransferKind::kRdmaStatic:
      s.kind = NodeKind::kRdmaSend;
      r.kind = NodeKind::kRdmaRecv;
      break;
    case TransferKind::kRdmaDynamic:
      s.kind = NodeKind::kRdmaSendDyn;
      r.kind = NodeKind::kRdmaRecvDyn;
      break;
    case TransferKind::kRpc:
      s.kind = NodeKind::kRpcSend;
      r.kind = NodeKind::kRpcRecv;
      break;
  }
  s.exec_mode = DefaultExecMode(s.kind);
  r.exec_mode = DefaultExecMode(r.kind);
}

// ---------------------------------------------------------------------------
// Parameter-server workload

PsWorkload BuildPsWorkload(const PsWorkloadOptions& o) {
  if (o.num_variables == 0 || o.workers == 0 || o.ps_shards == 0) {
    Fail(ErrorCode::kInvalidConfig, "variables, workers and shards must be >= 1");
  }
  if (o.compute_time < 0) Fail(ErrorCode::kInvalidConfig, "negative compute time");
  const uint64_t elems = o.model_bytes / o.num_variables / ElemSize(ElemType::kF32);
  if (elems == 0) {
    Fail(ErrorCode::kInvalidConfig, "model of " + std::to_string(o.model_bytes) +
                                        " bytes is too small for " +
                                        std::to_string(o.num_variables) +
                                        " variables");
  }
  PsWorkload w;
  w.variable_bytes = elems * ElemSize(ElemType::kF32);
  for (uint32_t k = 0; k < o.workers; ++k) w.worker_servers.push_back(k);
  for (uint32_t s = 0; s < o.ps_shards; ++s) w.ps_servers.push_back(o.workers + s);

  DataFlowGraph& g = w.graph;
  for (uint32_t v = 0; v < o.num_variables; ++v) {
    NodeId var = g.AddVariable("var" + std::to_string(v), TensorShape::Static({elems}));
    w.variables.push_back(var);
    w.placement[var] = w.ps_servers[v % o.ps_shards];
  }
  for (uint32_t v = 0; v < o.num_variables; ++v) {
    std::vector<NodeId> apply_inputs{w.variables[v]};
    for (uint32_t k = 0; k < o.workers; ++k) {
      NodeAttrs a;
      a.compute_time = o.compute_time;
      a.scale = 0.001f;
      NodeId grad = g.AddOp(NodeKind::kGenGrad,
                            "worker" + std::to_string(k) + "/grad" + std::to_string(v),
                            {w.variables[v]}, a);
      w.placement[grad] = w.worker_servers[k];
      apply_inputs.push_back(grad);
    }
    NodeAttrs a;
    a.scale = o.learning_rate;
    NodeId apply = g.AddOp(NodeKind::kApplyGrad, "apply" + std::to_string(v),
                           apply_inputs, a);
    w.placement[apply] = w.placement[w.variables[v]];
  }
  return w;
}

}  // namespace rdmaflow
