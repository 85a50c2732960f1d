#pragma once

// Versioned on-disk model checkpoints.
//
// Layout of a checkpoint directory:
//   manifest.json     format version, model version, CBN hash, hyperparameters,
//                     byte order, optional QoS target and the per-unit blob index
//   topology.json     rpc graph and metric schema the CBN is rebuilt from
//   normalizer.json   feature standardization
//   normal_values.json  optional
//   unit<i>_<net>.bin one blob per network: magic, layer count, activation,
//                     then per layer rows/cols headers followed by weights
//                     (column-major) and biases as little-endian float64

#include <bit>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <optional>

#include "sage/dataset.hpp"
#include "sage/gvae.hpp"

namespace sage {

inline constexpr int kCheckpointFormat = 1;

namespace detail {

inline constexpr char kBlobMagic[8] = {'S', 'G', 'M', 'L', 'P', '0', '0', '1'};

inline void write_u32(std::ostream& out, std::uint32_t v) { out.write(reinterpret_cast<const char*>(&v), sizeof v); }

inline std::uint32_t read_u32(std::istream& in) {
  std::uint32_t v = 0;
  in.read(reinterpret_cast<char*>(&v), sizeof v);
  require(static_cast<bool>(in), ErrorKind::kIo, "truncated blob");
  return v;
}

inline void write_doubles(std::ostream& out, const double* p, std::size_t n) {
  out.write(reinterpret_cast<const char*>(p), static_cast<std::streamsize>(n * sizeof(double)));
}

inline void read_doubles(std::istream& in, double* p, std::size_t n) {
  in.read(reinterpret_cast<char*>(p), static_cast<std::streamsize>(n * sizeof(double)));
  require(static_cast<bool>(in), ErrorKind::kIo, "truncated blob");
}

inline void write_mlp(const std::filesystem::path& p, const nn::Mlp& net) {
  std::ofstream out(p, std::ios::binary);
  require(static_cast<bool>(out), ErrorKind::kIo, "cannot write " + p.string());
  out.write(kBlobMagic, sizeof kBlobMagic);
  write_u32(out, static_cast<std::uint32_t>(net.layers().size()));
  write_u32(out, net.activation() == nn::Activation::kRelu ? 1u : 0u);
  for (const auto& l : net.layers()) {
    write_u32(out, static_cast<std::uint32_t>(l.weight.rows()));
    write_u32(out, static_cast<std::uint32_t>(l.weight.cols()));
    write_doubles(out, l.weight.data(), static_cast<std::size_t>(l.weight.size()));
    write_doubles(out, l.bias.data(), static_cast<std::size_t>(l.bias.size()));
  }
  require(static_cast<bool>(out), ErrorKind::kIo, "failed writing " + p.string());
}

inline nn::Mlp read_mlp(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  require(static_cast<bool>(in), ErrorKind::kIo, "cannot open " + p.string());
  char magic[8];
  in.read(magic, sizeof magic);
  require(static_cast<bool>(in) && std::equal(magic, magic + 8, kBlobMagic), ErrorKind::kIo,
          p.string() + " is not a parameter blob");
  const auto n_layers = read_u32(in);
  const auto act = read_u32(in) == 1u ? nn::Activation::kRelu : nn::Activation::kTanh;
  std::vector<nn::Layer> layers;
  std::vector<int> widths;
  for (std::uint32_t l = 0; l < n_layers; ++l) {
    const auto rows = read_u32(in);
    const auto cols = read_u32(in);
    require(layers.empty() || static_cast<int>(rows) == widths.back(), ErrorKind::kIo,
            p.string() + ": layer shapes do not chain");
    nn::Layer layer;
    layer.weight.resize(rows, cols);
    layer.bias.resize(cols);
    read_doubles(in, layer.weight.data(), static_cast<std::size_t>(layer.weight.size()));
    read_doubles(in, layer.bias.data(), static_cast<std::size_t>(layer.bias.size()));
    if (widths.empty()) widths.push_back(static_cast<int>(rows));
    widths.push_back(static_cast<int>(cols));
    layers.push_back(std::move(layer));
  }
  return nn::Mlp::from_layers(std::move(widths), act, std::move(layers));
}

}  // namespace detail

inline void save_checkpoint(const std::filesystem::path& dir, const GvaeModel& m,
                            const std::optional<NormalValues>& normals = std::nullopt,
                            std::optional<double> qos_target_us = std::nullopt) {
  static_assert(std::endian::native == std::endian::little, "checkpoint blobs are written little-endian");
  std::filesystem::create_directories(dir);
  nlohmann::json manifest;
  manifest["format"] = kCheckpointFormat;
  manifest["model_version"] = m.version;
  manifest["cbn_hash"] = hex64(m.cbn_hash());
  manifest["endianness"] = "little";
  manifest["hyper"] = to_json(m.hyper);
  if (qos_target_us) manifest["qos_target_us"] = *qos_target_us;
  manifest["units"] = nlohmann::json::array();
  for (std::size_t i = 0; i < m.units.size(); ++i) {
    const auto& u = m.units[i];
    nlohmann::json ju{{"service", u.service},
                      {"latent_dim", u.latent_dim},
                      {"step", u.step},
                      {"x", u.io.x},
                      {"y", u.io.y},
                      {"child", u.io.child},
                      {"parameter_hash", hex64(u.parameter_hash())}};
    const std::pair<const char*, const nn::Mlp*> nets[] = {
        {"encoder", &u.encoder}, {"prior", &u.prior}, {"decoder", &u.decoder}};
    for (const auto& [name, net] : nets) {
      const auto file = "unit" + std::to_string(i) + "_" + name + ".bin";
      detail::write_mlp(dir / file, *net);
      ju["blobs"][name] = {{"file", file}, {"widths", net->widths()}};
    }
    manifest["units"].push_back(ju);
  }
  detail::write_json_file(dir / "manifest.json", manifest);
  detail::write_json_file(dir / "topology.json", {{"rpc_graph", to_json(m.cbn.graph)},
                                                  {"metric_schema", metric_schema_to_json(m.cbn.schema)}});
  detail::write_json_file(dir / "normalizer.json", m.normalizer.to_json());
  if (normals) detail::write_json_file(dir / "normal_values.json", nlohmann::json(*normals));
}

struct Checkpoint {
  GvaeModel model;
  std::optional<NormalValues> normals;
  std::optional<double> qos_target_us;
};

inline Checkpoint load_checkpoint(const std::filesystem::path& dir) {
  const auto manifest = detail::read_json_file(dir / "manifest.json");
  require(manifest.at("format").get<int>() == kCheckpointFormat, ErrorKind::kIo, "unsupported checkpoint format");
  require(manifest.at("endianness").get<std::string>() == "little", ErrorKind::kIo, "unsupported byte order");
  const auto topo = detail::read_json_file(dir / "topology.json");
  Checkpoint ck;
  auto& m = ck.model;
  m.cbn = build_cbn(rpc_graph_from_json(topo.at("rpc_graph")), metric_schema_from_json(topo.at("metric_schema")));
  require(hex64(m.cbn.hash()) == manifest.at("cbn_hash").get<std::string>(), ErrorKind::kConsistency,
          "checkpoint CBN hash does not match its topology");
  m.hyper = hyper_from_json(manifest.at("hyper"));
  m.version = manifest.at("model_version").get<std::uint64_t>();
  m.schema = FeatureSchema(m.cbn, m.hyper.percentiles);
  m.normalizer = Normalizer::from_json(detail::read_json_file(dir / "normalizer.json"));
  for (const auto& ju : manifest.at("units")) {
    CvaeUnit u;
    u.service = ju.at("service").get<std::string>();
    u.latent_dim = ju.at("latent_dim").get<int>();
    u.io.x = ju.at("x").get<std::vector<std::string>>();
    u.io.y = ju.at("y").get<std::vector<std::string>>();
    u.io.child = ju.at("child").get<std::vector<std::string>>();
    u.encoder = detail::read_mlp(dir / ju.at("blobs").at("encoder").at("file").get<std::string>());
    u.prior = detail::read_mlp(dir / ju.at("blobs").at("prior").at("file").get<std::string>());
    u.decoder = detail::read_mlp(dir / ju.at("blobs").at("decoder").at("file").get<std::string>());
    u.reset_optimizer();
    u.step = ju.value("step", 0L);
    require(hex64(u.parameter_hash()) == ju.at("parameter_hash").get<std::string>(), ErrorKind::kIo,
            "parameter blobs of unit '" + u.service + "' are corrupt");
    u.bind(m.schema);
    m.units.push_back(std::move(u));
  }
  validate(m);
  if (manifest.contains("qos_target_us")) ck.qos_target_us = manifest.at("qos_target_us").get<double>();
  if (std::filesystem::exists(dir / "normal_values.json"))
    ck.normals = detail::read_json_file(dir / "normal_values.json").get<NormalValues>();
  return ck;
}

}  // namespace sage
