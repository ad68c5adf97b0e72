#pragma once

// Checkpoint container:
//
//   "DMILCKPT" | u32 version | u32 section_count
//   per section: u32 name_len | name | u64 json_len | json descriptor |
//                u64 value_count | value_count x f64
//
// Integers and doubles are little-endian. The descriptor lists the layer sizes,
// activations and the parameter blocks in storage order: for each layer the
// weight matrix (row-major, shape [out, in]) then the bias, followed by any
// model-specific blocks (log_std, normalizer vectors).

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "dmil/models.hpp"

namespace dmil {

namespace detail {

template <class T>
void write_le(std::ostream& out, T value) {
  unsigned char bytes[sizeof(T)];
  std::memcpy(bytes, &value, sizeof(T));
  if constexpr (std::endian::native == std::endian::big) std::reverse(bytes, bytes + sizeof(T));
  out.write(reinterpret_cast<const char*>(bytes), sizeof(T));
}

template <class T>
T read_le(std::istream& in) {
  unsigned char bytes[sizeof(T)];
  if (!in.read(reinterpret_cast<char*>(bytes), sizeof(T))) throw FormatError("checkpoint: truncated file");
  if constexpr (std::endian::native == std::endian::big) std::reverse(bytes, bytes + sizeof(T));
  T value;
  std::memcpy(&value, bytes, sizeof(T));
  return value;
}

}  // namespace detail

/// One named network plus its extra vectors, in serializable form.
struct CheckpointSection {
  nlohmann::json descriptor;
  std::vector<double> values;
};

inline constexpr char kCheckpointMagic[8] = {'D', 'M', 'I', 'L', 'C', 'K', 'P', 'T'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

class Checkpoint {
 public:
  std::map<std::string, CheckpointSection> sections;  // written in name order

  void write(std::ostream& out) const {
    out.write(kCheckpointMagic, sizeof kCheckpointMagic);
    detail::write_le<std::uint32_t>(out, kCheckpointVersion);
    detail::write_le<std::uint32_t>(out, static_cast<std::uint32_t>(sections.size()));
    for (const auto& [name, sec] : sections) {
      detail::write_le<std::uint32_t>(out, static_cast<std::uint32_t>(name.size()));
      out.write(name.data(), static_cast<std::streamsize>(name.size()));
      const std::string json = sec.descriptor.dump();
      detail::write_le<std::uint64_t>(out, json.size());
      out.write(json.data(), static_cast<std::streamsize>(json.size()));
      detail::write_le<std::uint64_t>(out, sec.values.size());
      for (double v : sec.values) detail::write_le<double>(out, v);
    }
  }

  static Checkpoint read(std::istream& in) {
    char magic[8];
    if (!in.read(magic, 8) || std::memcmp(magic, kCheckpointMagic, 8) != 0) {
      throw FormatError("checkpoint: bad magic");
    }
    if (detail::read_le<std::uint32_t>(in) != kCheckpointVersion) throw FormatError("checkpoint: unsupported version");
    const auto count = detail::read_le<std::uint32_t>(in);
    Checkpoint ck;
    for (std::uint32_t s = 0; s < count; ++s) {
      std::string name(detail::read_le<std::uint32_t>(in), '\0');
      if (!in.read(name.data(), static_cast<std::streamsize>(name.size()))) throw FormatError("checkpoint: truncated");
      std::string json(detail::read_le<std::uint64_t>(in), '\0');
      if (!in.read(json.data(), static_cast<std::streamsize>(json.size()))) throw FormatError("checkpoint: truncated");
      CheckpointSection sec;
      try {
        sec.descriptor = nlohmann::json::parse(json);
      } catch (const nlohmann::json::exception& e) {
        throw FormatError("checkpoint: bad descriptor for section " + name + ": " + e.what());
      }
      sec.values.resize(detail::read_le<std::uint64_t>(in));
      for (double& v : sec.values) v = detail::read_le<double>(in);
      ck.sections.emplace(std::move(name), std::move(sec));
    }
    return ck;
  }

  void save(const std::string& path) const {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw FormatError("cannot open '" + path + "' for writing");
    write(out);
  }

  static Checkpoint load(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw FormatError("cannot open checkpoint '" + path + "'");
    return read(in);
  }

  const CheckpointSection& section(const std::string& name) const {
    auto it = sections.find(name);
    if (it == sections.end()) throw FormatError("checkpoint: missing section '" + name + "'");
    return it->second;
  }
  bool has(const std::string& name) const { return sections.count(name) > 0; }
};

namespace detail {

class SectionWriter {
 public:
  explicit SectionWriter(std::string kind) { sec_.descriptor = {{"kind", std::move(kind)}}; }

  void net(const DenseNet& n) {
    sec_.descriptor["layer_sizes"] = n.layer_sizes();
    sec_.descriptor["activation"] = "relu";
    sec_.descriptor["output_activation"] = "identity";
    for (std::size_t k = 0; k < n.depth(); ++k) {
      const auto& l = n.layers()[k];
      sec_.descriptor["blocks"].push_back({{"name", "W" + std::to_string(k)}, {"shape", {l.weight.rows(), l.weight.cols()}}});
      for (Eigen::Index r = 0; r < l.weight.rows(); ++r) {
        for (Eigen::Index c = 0; c < l.weight.cols(); ++c) sec_.values.push_back(l.weight(r, c));
      }
      sec_.descriptor["blocks"].push_back({{"name", "b" + std::to_string(k)}, {"shape", {l.bias.size()}}});
      sec_.values.insert(sec_.values.end(), l.bias.data(), l.bias.data() + l.bias.size());
    }
  }

  void vector(const std::string& name, const Vector& v) {
    sec_.descriptor["blocks"].push_back({{"name", name}, {"shape", {v.size()}}});
    sec_.values.insert(sec_.values.end(), v.data(), v.data() + v.size());
  }

  void normalizer(const std::string& prefix, const Normalizer& n) {
    vector(prefix + "_shift", n.shift);
    vector(prefix + "_scale", n.scale);
  }

  void scalar(const std::string& key, const nlohmann::json& value) { sec_.descriptor[key] = value; }

  CheckpointSection take() { return std::move(sec_); }

 private:
  CheckpointSection sec_;
};

class SectionReader {
 public:
  SectionReader(const CheckpointSection& sec, const std::string& name) : sec_(sec), name_(name) {}

  DenseNet net() {
    DenseNet n(sec_.descriptor.at("layer_sizes").get<std::vector<int>>());
    for (auto& l : n.layers()) {
      for (Eigen::Index r = 0; r < l.weight.rows(); ++r) {
        for (Eigen::Index c = 0; c < l.weight.cols(); ++c) l.weight(r, c) = next();
      }
      for (Eigen::Index i = 0; i < l.bias.size(); ++i) l.bias[i] = next();
      block_ += 2;
    }
    return n;
  }

  Vector vector(const std::string& name) {
    const auto& blocks = sec_.descriptor.at("blocks");
    if (block_ >= blocks.size() || blocks[block_].at("name") != name) {
      throw FormatError("checkpoint section " + name_ + ": expected block " + name);
    }
    const auto len = blocks[block_].at("shape").at(0).get<Eigen::Index>();
    ++block_;
    Vector v(len);
    for (Eigen::Index i = 0; i < len; ++i) v[i] = next();
    return v;
  }

  Normalizer normalizer(const std::string& prefix) {
    Normalizer n;
    n.shift = vector(prefix + "_shift");
    n.scale = vector(prefix + "_scale");
    return n;
  }

  void finish() const {
    if (pos_ != sec_.values.size()) throw FormatError("checkpoint section " + name_ + ": trailing values");
  }

 private:
  double next() {
    if (pos_ >= sec_.values.size()) throw FormatError("checkpoint section " + name_ + ": too few values");
    return sec_.values[pos_++];
  }

  const CheckpointSection& sec_;
  std::string name_;
  std::size_t pos_ = 0;
  std::size_t block_ = 0;
};

}  // namespace detail

inline CheckpointSection to_section(const GaussianPolicy& p) {
  detail::SectionWriter w("gaussian_policy");
  w.net(p.net());
  w.vector("log_std", p.log_std());
  w.normalizer("input", p.input_normalizer());
  return w.take();
}

inline CheckpointSection to_section(const DynamicsModel& m) {
  detail::SectionWriter w("dynamics_model");
  w.scalar("state_dim", m.state_dim());
  w.net(m.net());
  w.normalizer("input", m.input_normalizer());
  w.vector("output_scale", m.output_scale());
  return w.take();
}

template <DiscriminatorKind K>
CheckpointSection to_section(const Discriminator<K>& d, int state_dim, int action_dim) {
  detail::SectionWriter w(K == DiscriminatorKind::rollout ? "rollout_discriminator" : "optimality_discriminator");
  w.scalar("state_dim", state_dim);
  w.scalar("action_dim", action_dim);
  w.net(d.net());
  w.normalizer("input", d.input_normalizer());
  return w.take();
}

inline GaussianPolicy policy_from_section(const CheckpointSection& sec) {
  detail::SectionReader r(sec, "policy");
  DenseNet net = r.net();
  GaussianPolicy p(std::move(net), r.vector("log_std"));
  p.input_normalizer() = r.normalizer("input");
  r.finish();
  return p;
}

inline DynamicsModel dynamics_from_section(const CheckpointSection& sec) {
  detail::SectionReader r(sec, "dynamics");
  const int sd = sec.descriptor.at("state_dim").get<int>();
  DenseNet net = r.net();
  DynamicsModel m(std::move(net), sd);
  m.input_normalizer() = r.normalizer("input");
  m.output_scale() = r.vector("output_scale");
  r.finish();
  return m;
}

template <DiscriminatorKind K>
Discriminator<K> discriminator_from_section(const CheckpointSection& sec) {
  detail::SectionReader r(sec, "discriminator");
  DenseNet net = r.net();
  Discriminator<K> d(std::move(net), sec.descriptor.at("state_dim").get<int>(),
                     sec.descriptor.at("action_dim").get<int>());
  d.input_normalizer() = r.normalizer("input");
  r.finish();
  return d;
}

/// Sections "policy", "dynamics", "disc_r", "disc_o"; models with an empty
/// network are omitted.
inline Checkpoint make_checkpoint(const ModelSet& m) {
  Checkpoint ck;
  ck.sections["policy"] = to_section(m.policy);
  if (m.dynamics.net().depth() > 0) ck.sections["dynamics"] = to_section(m.dynamics);
  const int sd = m.policy.state_dim(), ad = m.policy.action_dim();
  if (m.disc_r.net().depth() > 0) ck.sections["disc_r"] = to_section(m.disc_r, sd, ad);
  if (m.disc_o.net().depth() > 0) ck.sections["disc_o"] = to_section(m.disc_o, sd, ad);
  return ck;
}

inline ModelSet model_set_from_checkpoint(const Checkpoint& ck) {
  ModelSet m;
  m.policy = policy_from_section(ck.section("policy"));
  if (ck.has("dynamics")) m.dynamics = dynamics_from_section(ck.section("dynamics"));
  if (ck.has("disc_r")) m.disc_r = discriminator_from_section<DiscriminatorKind::rollout>(ck.section("disc_r"));
  if (ck.has("disc_o")) m.disc_o = discriminator_from_section<DiscriminatorKind::optimality>(ck.section("disc_o"));
  return m;
}

}  // namespace dmil
