#pragma once

#include <cstdint>
#include <filesystem>
#include <string>

#include "vistr/binary_io.hpp"
#include "vistr/errors.hpp"
#include "vistr/train.hpp"
#include "vistr/vae.hpp"

namespace vistr {

inline constexpr std::string_view kModelMagic = "VSTM";
inline constexpr std::uint32_t kModelVersion = 1;

struct Checkpoint {
  VaeModel<float> model;
  TrainConfig config;
};

namespace detail {

inline void write_config(io::Writer& w, const TrainConfig& c) {
  w.put<std::uint64_t>(c.iterations);
  w.put<std::uint32_t>(c.batch_images);
  w.put<std::uint32_t>(c.points_per_image);
  w.put<std::uint32_t>(c.mc_samples);
  w.put<double>(c.max_lr);
  w.put<double>(c.warmup_fraction);
  w.put<double>(c.div_factor);
  w.put<double>(c.final_div_factor);
  w.put<double>(c.adam_beta1);
  w.put<double>(c.adam_beta2);
  w.put<double>(c.adam_eps);
  w.put<std::uint32_t>(c.latent_dim);
  w.put<std::uint32_t>(c.hidden_width);
  w.put<std::uint32_t>(c.hidden_layers);
  w.put<std::uint32_t>(c.lift_dim);
  w.put<std::uint64_t>(c.kl_warmup_start);
  w.put<std::uint64_t>(c.kl_period);
  w.put<double>(c.beta_before_warmup);
  w.put<double>(c.embedding_noise_var);
  w.put<double>(c.sigma_init);
  w.put<std::uint64_t>(c.seed);
  w.put<std::uint32_t>(c.chunk_pairs);
}

inline TrainConfig read_config(io::Reader& r) {
  TrainConfig c;
  c.iterations = r.get<std::uint64_t>();
  c.batch_images = r.get<std::uint32_t>();
  c.points_per_image = r.get<std::uint32_t>();
  c.mc_samples = r.get<std::uint32_t>();
  c.max_lr = r.get<double>();
  c.warmup_fraction = r.get<double>();
  c.div_factor = r.get<double>();
  c.final_div_factor = r.get<double>();
  c.adam_beta1 = r.get<double>();
  c.adam_beta2 = r.get<double>();
  c.adam_eps = r.get<double>();
  c.latent_dim = r.get<std::uint32_t>();
  c.hidden_width = r.get<std::uint32_t>();
  c.hidden_layers = r.get<std::uint32_t>();
  c.lift_dim = r.get<std::uint32_t>();
  c.kl_warmup_start = r.get<std::uint64_t>();
  c.kl_period = r.get<std::uint64_t>();
  c.beta_before_warmup = r.get<double>();
  c.embedding_noise_var = r.get<double>();
  c.sigma_init = r.get<double>();
  c.seed = r.get<std::uint64_t>();
  c.chunk_pairs = r.get<std::uint32_t>();
  return c;
}

}  // namespace detail

/// Layout: magic "VSTM", u32 version, u32 latent dim, u32 embedding dim,
/// u32 hidden width, u32 hidden layers, u32 lift dim, u32 residual layer,
/// u32 tensor count, (u32 rows, u32 cols) per tensor, u64 parameter count,
/// f32 parameters in table order, f64 norm scale, 3 x f64 norm offset,
/// training-config echo.
inline std::vector<std::uint8_t> serialize_model(const VaeModel<float>& m, const TrainConfig& cfg) {
  io::Writer w;
  const auto& a = m.arch();
  w.put_magic(kModelMagic);
  w.put<std::uint32_t>(kModelVersion);
  w.put<std::uint32_t>(a.latent_dim);
  w.put<std::uint32_t>(a.embedding_dim);
  w.put<std::uint32_t>(a.hidden_width);
  w.put<std::uint32_t>(a.hidden_layers);
  w.put<std::uint32_t>(a.lift_dim);
  w.put<std::uint32_t>(a.residual_layer);
  const auto& shapes = m.layout().shapes();
  w.put<std::uint32_t>(static_cast<std::uint32_t>(shapes.size()));
  for (const auto& s : shapes) {
    w.put<std::uint32_t>(s.rows);
    w.put<std::uint32_t>(s.cols);
  }
  w.put<std::uint64_t>(m.parameter_count());
  w.put_span<float>(m.params());
  w.put<double>(m.norm().scale);
  for (int k = 0; k < 3; ++k) w.put<double>(m.norm().offset[k]);
  detail::write_config(w, cfg);
  return w.bytes();
}

inline void save_model(const VaeModel<float>& m, const TrainConfig& cfg, const std::string& path) {
  io::Writer w;
  w.put_span<std::uint8_t>(serialize_model(m, cfg));
  w.write_file(path);
}

inline Checkpoint parse_model(io::Reader r) {
  r.expect_magic(kModelMagic);
  const auto version = r.get<std::uint32_t>();
  require(version == kModelVersion, ErrorKind::Format, "unsupported checkpoint version " + std::to_string(version));
  VaeArch a;
  a.latent_dim = r.get<std::uint32_t>();
  a.embedding_dim = r.get<std::uint32_t>();
  a.hidden_width = r.get<std::uint32_t>();
  a.hidden_layers = r.get<std::uint32_t>();
  a.lift_dim = r.get<std::uint32_t>();
  a.residual_layer = r.get<std::uint32_t>();
  require(a.latent_dim >= 1 && a.embedding_dim >= 1 && a.hidden_width >= 1 && a.hidden_layers >= 1 &&
              a.lift_dim >= 1 && a.residual_layer < a.hidden_layers,
          ErrorKind::Format, "invalid architecture header");
  require(a.hidden_width <= (1u << 16) && a.embedding_dim <= (1u << 20) && a.hidden_layers <= 1024,
          ErrorKind::Format, "implausible architecture header");

  Checkpoint ck;
  ck.model = VaeModel<float>(a);
  const auto& expected = ck.model.layout().shapes();
  const auto n_tensors = r.get<std::uint32_t>();
  require(n_tensors == expected.size(), ErrorKind::Format, "tensor table does not match architecture");
  for (const auto& s : expected) {
    const auto rows = r.get<std::uint32_t>(), cols = r.get<std::uint32_t>();
    require(rows == s.rows && cols == s.cols, ErrorKind::Format, "tensor shape mismatch for " + s.name);
  }
  const auto n_params = r.get<std::uint64_t>();
  require(n_params == ck.model.parameter_count(), ErrorKind::Format, "parameter count mismatch");
  r.get_span<float>(ck.model.mutable_params());
  NormTransform norm;
  norm.scale = r.get<double>();
  for (int k = 0; k < 3; ++k) norm.offset[k] = r.get<double>();
  ck.model.set_norm(norm);
  ck.config = detail::read_config(r);
  require(r.at_end(), ErrorKind::Format, "trailing bytes after checkpoint");
  for (float v : ck.model.params()) require(std::isfinite(v), ErrorKind::Data, "non-finite parameter in checkpoint");
  return ck;
}

inline Checkpoint load_model(const std::string& path) { return parse_model(io::Reader::from_file(path)); }

/// Loads and checks the model against the embedding dimension the caller's
/// data provides.
inline Checkpoint load_model(const std::string& path, std::uint32_t expected_embedding_dim) {
  Checkpoint ck = load_model(path);
  require(ck.model.arch().embedding_dim == expected_embedding_dim, ErrorKind::Shape,
          "model embedding dimension " + std::to_string(ck.model.arch().embedding_dim) +
              " does not match data (" + std::to_string(expected_embedding_dim) + ")");
  return ck;
}

}  // namespace vistr
