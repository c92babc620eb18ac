#include "gsgcn/graph.hpp"

#include <algorithm>
#include <cmath>
#include <deque>
#include <set>
#include <sstream>

#include <json.hpp>

namespace gsgcn {

namespace {

SkeletonGraph make_graph(int num_joints, std::vector<std::pair<int, int>> edges) {
  SkeletonGraph g;
  g.num_joints = num_joints;
  std::set<std::pair<int, int>> seen;
  for (auto [i, j] : edges) {
    if (i == j) throw GraphError("skeleton graph: self-loop at joint " + std::to_string(i));
    if (i < 0 || j < 0 || i >= num_joints || j >= num_joints) {
      throw GraphError("skeleton graph: edge (" + std::to_string(i) + ", " + std::to_string(j) +
                       ") out of range for " + std::to_string(num_joints) + " joints");
    }
    auto key = std::minmax(i, j);
    if (!seen.insert(key).second) {
      throw GraphError("skeleton graph: duplicate edge (" + std::to_string(key.first) + ", " +
                       std::to_string(key.second) + ")");
    }
    g.edges.emplace_back(key.first, key.second);
  }
  // connectivity, required so hop distances are finite
  auto dist = shortest_path_distances(g);
  for (int j = 0; j < num_joints; ++j) {
    if (dist[0][static_cast<size_t>(j)] < 0) {
      throw GraphError("skeleton graph: joint " + std::to_string(j) +
                       " is not connected to joint 0");
    }
  }
  return g;
}

}  // namespace

std::vector<std::string> registered_layouts() { return {"crowdpose14", "path3"}; }

SkeletonGraph build_skeleton_graph(const std::string& layout_name) {
  if (layout_name == "crowdpose14") {
    // 0..13: L/R shoulder, L/R elbow, L/R wrist, L/R hip, L/R knee,
    // L/R ankle, head top, neck.
    return make_graph(14, {{12, 13},
                           {13, 0},
                           {13, 1},
                           {0, 2},
                           {2, 4},
                           {1, 3},
                           {3, 5},
                           {13, 6},
                           {13, 7},
                           {6, 8},
                           {8, 10},
                           {7, 9},
                           {9, 11}});
  }
  if (layout_name == "path3") {
    return make_graph(3, {{0, 1}, {1, 2}});
  }
  std::ostringstream os;
  os << "unknown skeleton layout \"" << layout_name << "\"; registered:";
  for (const auto& n : registered_layouts()) os << ' ' << n;
  throw GraphError(os.str());
}

SkeletonGraph load_skeleton_graph_json(const std::string& json_text) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(json_text);
  } catch (const nlohmann::json::exception& e) {
    throw GraphError(std::string("skeleton layout JSON: ") + e.what());
  }
  if (!j.contains("num_joints") || !j.contains("edges")) {
    throw GraphError("skeleton layout JSON: expected keys num_joints and edges");
  }
  std::vector<std::pair<int, int>> edges;
  for (const auto& e : j["edges"]) {
    if (!e.is_array() || e.size() != 2) {
      throw GraphError("skeleton layout JSON: each edge must be a pair");
    }
    edges.emplace_back(e[0].get<int>(), e[1].get<int>());
  }
  return make_graph(j["num_joints"].get<int>(), std::move(edges));
}

std::vector<std::vector<int>> shortest_path_distances(const SkeletonGraph& graph) {
  const int k = graph.num_joints;
  std::vector<std::vector<int>> adj(static_cast<size_t>(k));
  for (auto [i, j] : graph.edges) {
    adj[static_cast<size_t>(i)].push_back(j);
    adj[static_cast<size_t>(j)].push_back(i);
  }
  std::vector<std::vector<int>> dist(static_cast<size_t>(k),
                                     std::vector<int>(static_cast<size_t>(k), -1));
  for (int s = 0; s < k; ++s) {
    auto& d = dist[static_cast<size_t>(s)];
    d[static_cast<size_t>(s)] = 0;
    std::deque<int> q{s};
    while (!q.empty()) {
      const int u = q.front();
      q.pop_front();
      for (int v : adj[static_cast<size_t>(u)]) {
        if (d[static_cast<size_t>(v)] < 0) {
          d[static_cast<size_t>(v)] = d[static_cast<size_t>(u)] + 1;
          q.push_back(v);
        }
      }
    }
  }
  return dist;
}

Tensor k_hop_adjacency(const SkeletonGraph& graph, int k) {
  if (k < 1) throw GraphError("k_hop_adjacency: k must be >= 1");
  const int n = graph.num_joints;
  auto dist = shortest_path_distances(graph);
  Tensor a({n, n});
  for (int i = 0; i < n; ++i) {
    for (int j = 0; j < n; ++j) {
      if (dist[static_cast<size_t>(i)][static_cast<size_t>(j)] == k) {
        a.at({i, j}) = real(1);
      }
    }
  }
  return a;
}

Tensor normalize_adjacency(const Tensor& a) {
  if (a.rank() != 2 || a.dim(0) != a.dim(1)) {
    throw GraphError("normalize_adjacency: expected a square matrix, got " + a.shape_str());
  }
  const int n = a.dim(0);
  Tensor with_loops = a;
  for (int i = 0; i < n; ++i) with_loops.at({i, i}) += real(1);
  std::vector<real> dinv(static_cast<size_t>(n));
  for (int i = 0; i < n; ++i) {
    real deg = 0;
    for (int j = 0; j < n; ++j) deg += with_loops.at({i, j});
    dinv[static_cast<size_t>(i)] = real(1) / std::sqrt(deg);
  }
  Tensor out({n, n});
  for (int i = 0; i < n; ++i) {
    for (int j = 0; j < n; ++j) {
      out.at({i, j}) = dinv[static_cast<size_t>(i)] * with_loops.at({i, j}) *
                       dinv[static_cast<size_t>(j)];
    }
  }
  return out;
}

Tensor window_adjacency(const Tensor& a_norm, int tau) {
  if (tau < 1 || tau % 2 == 0) {
    throw GraphError("window_adjacency: tau must be odd and >= 1, got " + std::to_string(tau));
  }
  const int k = a_norm.dim(0);
  const int n = tau * k;
  Tensor out({n, n});
  for (int bi = 0; bi < tau; ++bi) {
    for (int bj = 0; bj < tau; ++bj) {
      for (int i = 0; i < k; ++i) {
        for (int j = 0; j < k; ++j) {
          out.at({bi * k + i, bj * k + j}) = a_norm.at({i, j});
        }
      }
    }
  }
  return out;
}

const Tensor& AdjacencySet::windowed_at(int tau, int scale) const {
  auto it = windowed.find({tau, scale});
  if (it == windowed.end()) {
    throw GraphError("adjacency set: no windowed matrix for (tau=" + std::to_string(tau) +
                     ", scale=" + std::to_string(scale) + ")");
  }
  return it->second;
}

AdjacencySet build_adjacency_set(const SkeletonGraph& graph, int max_scale,
                                 const std::vector<int>& window_sizes) {
  AdjacencySet set;
  for (int s = 1; s <= max_scale; ++s) {
    Tensor norm = normalize_adjacency(k_hop_adjacency(graph, s));
    for (int tau : window_sizes) {
      set.windowed.emplace(std::make_pair(tau, s), window_adjacency(norm, tau));
    }
    set.scales.push_back(std::move(norm));
  }
  return set;
}

}  // namespace gsgcn
