#pragma once

#include <string>
#include <vector>

#include "bvr/rng.hpp"
#include "bvr/tape.hpp"

namespace bvr::relation {

enum class GeometryMode { direct, shared, off };

struct RelationConfig {
  std::size_t channels = 64;    // C, feature dim of queries and keys
  std::size_t heads = 4;        // G
  std::size_t embed_dim = 16;   // d0, sin/cos embedding dim
  std::size_t mlp_dim = 16;     // d1, geometry MLP inner dim
  std::size_t key_budget = 10;  // k, top-k selection budget
  std::size_t map_size = 64;    // M, shared location map bins per axis

  std::size_t head_dim() const { return channels / heads; }
  // Pixels per map bin at a pyramid level: U = S/2. Coverage per axis is
  // [−(M/2)·U, (M/2)·U).
  static double unit_length(int stride) { return static_cast<double>(stride) / 2.0; }
  void validate() const;
};

// Per-tape handles to one BVR module's trainable parameters: per-head
// query/key/value projections (C → C/G each) and the two-layer geometry MLP
// (d0 → d1 → G, ReLU between, no biases).
struct AttentionParams {
  std::vector<Val> wq, wk, wv;
  Val mlp_w1, mlp_w2;
};

void init_attention_params(ParamStore& store, const std::string& prefix,
                           const RelationConfig& cfg, Rng& rng);
AttentionParams bind_attention_params(Tape& t, ParamStore& store, const std::string& prefix,
                                      const RelationConfig& cfg);
std::vector<std::string> attention_param_names(const std::string& prefix,
                                               const RelationConfig& cfg);

// (N,2) unit-space offsets -> (N,d0). First d0/2 entries encode dx, the rest
// dy; within each half sin/cos alternate over frequencies 1000^(4i/d0).
Val sinusoidal_embed(Tape& t, Val offsets_units, std::size_t d0);

// Geometry term over all query/key pairs: MLP(embed((key−query)/unit)).
// Returns (Nq, K, G). Requires at least one key.
Val geometry_term_direct(Tape& t, Val query_pts, Val key_pts, const AttentionParams& params,
                         const RelationConfig& cfg, double unit);

// Precomputed G-channel geometric map over the quantized relative-location
// grid. The grid holds MLP(embed(q − M/2, p − M/2)) and therefore lives in
// unit space: `unit` only fixes the pixel coverage window at sampling time,
// so one grid serves every pyramid level.
struct SharedLocationMap {
  Val grid;  // (G, M, M)
  double unit = 1.0;
  std::size_t map_size = 0;
};

SharedLocationMap build_shared_map(Tape& t, const AttentionParams& params,
                                   const RelationConfig& cfg, double unit);
// Same grid, reinterpreted for another pyramid level's unit length.
SharedLocationMap with_unit(const SharedLocationMap& map, double unit);

// Bilinear lookup of the geometry term: sample at (key−query)/unit + M/2,
// clamped to the map border. Returns (Nq, K, G).
Val geometry_term_shared(Tape& t, Val query_pts, Val key_pts, const SharedLocationMap& map);

struct QuerySet {
  Val features;  // (Nq, C)
  Val points;    // (Nq, 2) image-pixel query points
};

struct KeySet {
  Val features;   // (K', C), unset when count == 0
  Val locations;  // (K', 2) image pixels
  std::vector<double> scores;
  std::vector<int> kinds;
  std::vector<std::size_t> levels;
  std::size_t count = 0;
};

// Multi-head cross-representation attention (residual): per head g,
//   w_ij = softmax_j(S^A_ijg + S^G_ijg),  out_i = f_i + concat_g Σ_j w_ij·(f_j·Wv_g)
// with S^A the scaled dot product of projected features (when appearance is
// on) and S^G from the selected geometry mode. An empty key set returns the
// query features unchanged. `unit` is required for direct geometry; `map` for
// shared geometry.
Val bvr_attend(Tape& t, const QuerySet& queries, const KeySet& keys,
               const AttentionParams& params, const RelationConfig& cfg, GeometryMode geometry,
               bool appearance, double unit = 1.0, const SharedLocationMap* map = nullptr);

}  // namespace bvr::relation
