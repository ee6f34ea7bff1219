#include "bvr/relation.hpp"

#include <cmath>

#include "bvr/errors.hpp"

namespace bvr::relation {

void RelationConfig::validate() const {
  if (channels == 0 || heads == 0 || embed_dim == 0 || mlp_dim == 0 || key_budget == 0 ||
      map_size == 0) {
    throw ConfigError("relation config: all dimensions must be positive");
  }
  if (channels % heads != 0) {
    throw ConfigError("relation config: channels must be divisible by heads");
  }
  if (embed_dim % 4 != 0) {
    throw ConfigError("relation config: embed_dim must be divisible by 4");
  }
  if (map_size % 2 != 0) {
    throw ConfigError("relation config: map_size must be even");
  }
}

std::vector<std::string> attention_param_names(const std::string& prefix,
                                               const RelationConfig& cfg) {
  std::vector<std::string> names;
  for (std::size_t g = 0; g < cfg.heads; ++g) {
    names.push_back(prefix + ".wq" + std::to_string(g));
    names.push_back(prefix + ".wk" + std::to_string(g));
    names.push_back(prefix + ".wv" + std::to_string(g));
  }
  names.push_back(prefix + ".mlp_w1");
  names.push_back(prefix + ".mlp_w2");
  return names;
}

void init_attention_params(ParamStore& store, const std::string& prefix,
                           const RelationConfig& cfg, Rng& rng) {
  cfg.validate();
  const std::size_t c = cfg.channels, hd = cfg.head_dim();
  auto randn = [&rng](std::vector<std::size_t> shape, double stddev) {
    Array a(std::move(shape));
    for (std::size_t i = 0; i < a.size(); ++i) a[i] = stddev * rng.normal();
    return a;
  };
  const double proj_std = 1.0 / std::sqrt(static_cast<double>(c));
  for (std::size_t g = 0; g < cfg.heads; ++g) {
    store.add(prefix + ".wq" + std::to_string(g), randn({c, hd}, proj_std));
    store.add(prefix + ".wk" + std::to_string(g), randn({c, hd}, proj_std));
    // Small value projection so the residual starts close to identity.
    store.add(prefix + ".wv" + std::to_string(g), randn({c, hd}, 0.3 * proj_std));
  }
  store.add(prefix + ".mlp_w1",
            randn({cfg.embed_dim, cfg.mlp_dim},
                  std::sqrt(2.0 / static_cast<double>(cfg.embed_dim))));
  store.add(prefix + ".mlp_w2",
            randn({cfg.mlp_dim, cfg.heads}, std::sqrt(1.0 / static_cast<double>(cfg.mlp_dim))));
}

AttentionParams bind_attention_params(Tape& t, ParamStore& store, const std::string& prefix,
                                      const RelationConfig& cfg) {
  AttentionParams p;
  for (std::size_t g = 0; g < cfg.heads; ++g) {
    p.wq.push_back(t.param_from(store, prefix + ".wq" + std::to_string(g)));
    p.wk.push_back(t.param_from(store, prefix + ".wk" + std::to_string(g)));
    p.wv.push_back(t.param_from(store, prefix + ".wv" + std::to_string(g)));
  }
  p.mlp_w1 = t.param_from(store, prefix + ".mlp_w1");
  p.mlp_w2 = t.param_from(store, prefix + ".mlp_w2");
  return p;
}

Val sinusoidal_embed(Tape& t, Val offsets_units, std::size_t d0) {
  return t.sincos_embed(offsets_units, d0, 1.0);
}

namespace {

// embed -> d1 -> ReLU -> G, applied row-wise to (N,2) offsets. inv_unit folds
// the unit division into the embedding.
Val geometry_mlp(Tape& t, Val offsets, const AttentionParams& params, const RelationConfig& cfg,
                 double inv_unit) {
  Val emb = t.sincos_embed(offsets, cfg.embed_dim, inv_unit);
  Val hidden = t.relu(t.matmul(emb, params.mlp_w1));
  return t.matmul(hidden, params.mlp_w2);
}

void check_points(Tape& t, Val pts, const char* what) {
  const Array& a = t.value(pts);
  if (a.rank() != 2 || a.extent(1) != 2) {
    throw ConfigError(std::string(what) + ": expects (N,2) points, got " + shape_str(a.shape()));
  }
}

}  // namespace

Val geometry_term_direct(Tape& t, Val query_pts, Val key_pts, const AttentionParams& params,
                         const RelationConfig& cfg, double unit) {
  cfg.validate();
  check_points(t, query_pts, "geometry_term_direct");
  check_points(t, key_pts, "geometry_term_direct");
  if (unit <= 0.0) throw ConfigError("geometry_term_direct: unit must be positive");
  const std::size_t nq = t.value(query_pts).extent(0);
  const std::size_t nk = t.value(key_pts).extent(0);
  Val offsets = t.pair_offsets(query_pts, key_pts);  // (nq·nk, 2) in pixels
  Val term = geometry_mlp(t, offsets, params, cfg, 1.0 / unit);
  return t.reshape(term, {nq, nk, cfg.heads});
}

SharedLocationMap build_shared_map(Tape& t, const AttentionParams& params,
                                   const RelationConfig& cfg, double unit) {
  cfg.validate();
  if (unit <= 0.0) throw ConfigError("build_shared_map: unit must be positive");
  const std::size_t m = cfg.map_size;
  const double half = static_cast<double>(m) / 2.0;
  Array lattice({m * m, 2});
  for (std::size_t p = 0; p < m; ++p) {
    for (std::size_t q = 0; q < m; ++q) {
      lattice[(p * m + q) * 2] = static_cast<double>(q) - half;      // dx in units
      lattice[(p * m + q) * 2 + 1] = static_cast<double>(p) - half;  // dy in units
    }
  }
  Val term = geometry_mlp(t, t.input(std::move(lattice)), params, cfg, 1.0);  // (m², G)
  Val grid = t.reshape(t.transpose(term), {cfg.heads, m, m});
  return SharedLocationMap{grid, unit, m};
}

SharedLocationMap with_unit(const SharedLocationMap& map, double unit) {
  if (unit <= 0.0) throw ConfigError("with_unit: unit must be positive");
  return SharedLocationMap{map.grid, unit, map.map_size};
}

Val geometry_term_shared(Tape& t, Val query_pts, Val key_pts, const SharedLocationMap& map) {
  check_points(t, query_pts, "geometry_term_shared");
  check_points(t, key_pts, "geometry_term_shared");
  if (!map.grid.valid() || map.map_size == 0) {
    throw ConfigError("geometry_term_shared: map not built");
  }
  const std::size_t nq = t.value(query_pts).extent(0);
  const std::size_t nk = t.value(key_pts).extent(0);
  const std::size_t g = t.value(map.grid).extent(0);
  Val offsets = t.pair_offsets(query_pts, key_pts);  // pixels
  Val coords = t.add_const(t.scale(offsets, 1.0 / map.unit),
                           static_cast<double>(map.map_size) / 2.0);
  Val sampled = t.bilinear_sample(map.grid, coords);  // (nq·nk, G)
  return t.reshape(sampled, {nq, nk, g});
}

Val bvr_attend(Tape& t, const QuerySet& queries, const KeySet& keys,
               const AttentionParams& params, const RelationConfig& cfg, GeometryMode geometry,
               bool appearance, double unit, const SharedLocationMap* map) {
  cfg.validate();
  if (geometry == GeometryMode::off && !appearance) {
    throw ConfigError("bvr_attend: geometry and appearance cannot both be off");
  }
  const Array& fq = t.value(queries.features);
  if (fq.rank() != 2 || fq.extent(1) != cfg.channels) {
    throw ConfigError("bvr_attend: query features " + shape_str(fq.shape()) +
                      " do not match configured channels");
  }
  if (keys.count == 0) return queries.features;
  const Array& fk = t.value(keys.features);
  if (fk.rank() != 2 || fk.extent(1) != cfg.channels || fk.extent(0) != keys.count) {
    throw ConfigError("bvr_attend: key features " + shape_str(fk.shape()) +
                      " do not match configured channels");
  }
  const std::size_t nq = fq.extent(0);
  const std::size_t nk = keys.count;

  Val geom_term;  // (nq, nk, G)
  if (geometry == GeometryMode::direct) {
    geom_term = geometry_term_direct(t, queries.points, keys.locations, params, cfg, unit);
  } else if (geometry == GeometryMode::shared) {
    if (!map) throw ConfigError("bvr_attend: shared geometry mode requires a location map");
    geom_term = geometry_term_shared(t, queries.points, keys.locations, *map);
  }

  const double inv_sqrt_dim = 1.0 / std::sqrt(static_cast<double>(cfg.head_dim()));
  std::vector<Val> head_outputs;
  head_outputs.reserve(cfg.heads);
  for (std::size_t g = 0; g < cfg.heads; ++g) {
    Val logits;
    if (appearance) {
      Val q = t.matmul(queries.features, params.wq[g]);  // (nq, C/G)
      Val k = t.matmul(keys.features, params.wk[g]);     // (nk, C/G)
      logits = t.scale(t.matmul_nt(q, k), inv_sqrt_dim);
    }
    if (geometry != GeometryMode::off) {
      Val sg = t.reshape(t.gather(geom_term, 2, {g}), {nq, nk});
      logits = logits.valid() ? t.add(logits, sg) : sg;
    }
    Val weights = t.softmax(logits, 1);
    Val values = t.matmul(keys.features, params.wv[g]);  // (nk, C/G)
    head_outputs.push_back(t.matmul(weights, values));   // (nq, C/G)
  }
  Val delta = cfg.heads == 1 ? head_outputs[0] : t.concat(head_outputs, 1);
  return t.add(queries.features, delta);
}

}  // namespace bvr::relation
