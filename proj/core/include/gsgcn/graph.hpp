#pragma once

#include <map>
#include <string>
#include <utility>
#include <vector>

#include "gsgcn/tensor.hpp"

namespace gsgcn {

class GraphError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Undirected body-joint graph. Connected, no self-loops, no duplicate edges.
struct SkeletonGraph {
  int num_joints = 0;
  std::vector<std::pair<int, int>> edges;
};

// Registered layouts: "crowdpose14" (the 14-joint layout used by the default
// configs) and "path3" (a 3-joint chain for tests).
SkeletonGraph build_skeleton_graph(const std::string& layout_name);
// Custom layout from JSON: {"num_joints":K,"edges":[[i,j],...]}.
SkeletonGraph load_skeleton_graph_json(const std::string& json_text);
std::vector<std::string> registered_layouts();

// All-pairs shortest path distances by BFS; -1 for unreachable pairs.
std::vector<std::vector<int>> shortest_path_distances(const SkeletonGraph& graph);

// Binary matrix with (i,j) = 1 iff shortest-path distance is exactly k.
// Zero diagonal, symmetric; all-zero when k exceeds the diameter.
Tensor k_hop_adjacency(const SkeletonGraph& graph, int k);

// Symmetric normalization with self-loops: D^{-1/2} (A + I) D^{-1/2}.
Tensor normalize_adjacency(const Tensor& a);

// Dense spatial-temporal window: a tau*K x tau*K block matrix whose every
// (a, b) block equals `a_norm`, connecting each joint to its k-hop
// neighbours in every frame of the window.
Tensor window_adjacency(const Tensor& a_norm, int tau);

// Normalized k-hop adjacencies for scales 1..max_scale plus their windowed
// expansions for the requested window sizes.
struct AdjacencySet {
  std::vector<Tensor> scales;                 // [max_scale] each K x K
  std::map<std::pair<int, int>, Tensor> windowed;  // (tau, scale) -> tauK x tauK

  const Tensor& windowed_at(int tau, int scale) const;
};

AdjacencySet build_adjacency_set(const SkeletonGraph& graph, int max_scale,
                                 const std::vector<int>& window_sizes);

}  // namespace gsgcn
