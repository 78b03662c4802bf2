#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <vector>

#include "lop/core/builder.hpp"
#include "lop/core/json.hpp"

namespace lop {

inline Json shape_to_json(const Shape& s) { return Json{{"channels", s.channels}, {"height", s.height}, {"width", s.width}}; }

inline Shape shape_from_json(const Json& j) {
  if (j.is_number_integer()) return Shape{j.get<int>(), 1, 1};
  return Shape{j.at("channels").get<int>(), j.value("height", 1), j.value("width", 1)};
}

/// Architecture document: input shape plus the ordered module list with
/// kinds, wiring, output shapes and hyperparameters. Parameters are not
/// included; see save_parameters().
inline Json architecture_to_json(const Network& net) {
  Json mods = Json::array();
  for (const auto& m : net.modules()) {
    Json j{{"kind", to_string(m.kind)}, {"name", m.name}, {"inputs", m.inputs}};
    switch (m.kind) {
      case ModuleKind::Linear: j["out"] = m.out_shape.channels; break;
      case ModuleKind::Conv2d:
        j["out"] = m.out_shape.channels;
        j["kernel"] = m.kernel;
        j["stride"] = m.stride;
        j["padding"] = m.padding;
        break;
      case ModuleKind::BatchNorm:
        j["momentum"] = m.momentum;
        j["eps"] = m.eps;
        break;
      case ModuleKind::LayerNorm: j["eps"] = m.eps; break;
      case ModuleKind::Activation:
        j["fn"] = to_string(m.fn);
        j["gain"] = m.gain;
        j["shift"] = m.shift;
        break;
      case ModuleKind::Dropout: j["p"] = m.dropout_p; break;
      case ModuleKind::Flatten:
        if (!m.permutation.empty()) j["permutation"] = m.permutation;
        break;
      default: break;
    }
    j["out_shape"] = shape_to_json(m.out_shape);
    mods.push_back(std::move(j));
  }
  return Json{{"input", shape_to_json(net.input_shape())}, {"modules", std::move(mods)}};
}

/// Builds a freshly initialized network from an architecture document.
/// Field errors are reported with their JSON path.
inline Network network_from_architecture(const Json& doc, std::uint64_t seed) {
  if (!doc.contains("input")) throw ValidationError("missing field", "architecture.input");
  if (!doc.contains("modules") || !doc["modules"].is_array()) throw ValidationError("missing array", "architecture.modules");
  NetworkBuilder b(shape_from_json(doc["input"]), seed);
  const auto& mods = doc["modules"];
  for (std::size_t i = 0; i < mods.size(); ++i) {
    const auto& j = mods[i];
    const std::string path = "architecture.modules[" + std::to_string(i) + "]";
    try {
      const ModuleKind kind = module_kind_from_string(j.at("kind").get<std::string>());
      int from = -1;
      if (j.contains("inputs") && kind != ModuleKind::ResidualAdd) from = j["inputs"].at(0).get<int>();
      switch (kind) {
        case ModuleKind::Linear: b.linear(j.at("out").get<int>(), from); break;
        case ModuleKind::Conv2d:
          b.conv2d(j.at("out").get<int>(), j.at("kernel").get<int>(), j.value("stride", 1), j.value("padding", 0), from);
          break;
        case ModuleKind::BatchNorm: b.batchnorm(from, j.value("momentum", 0.1), j.value("eps", 1e-5)); break;
        case ModuleKind::LayerNorm: b.layernorm(from, j.value("eps", 1e-5)); break;
        case ModuleKind::Activation:
          b.activation(activation_from_string(j.value("fn", std::string("relu"))), j.value("gain", 1.0),
                       j.value("shift", 0.0), from, j.value("slope", 0.25));
          break;
        case ModuleKind::Dropout: b.dropout(j.at("p").get<double>(), from); break;
        case ModuleKind::ResidualAdd: {
          const auto& in = j.at("inputs");
          b.residual_add(in.at(0).get<int>(), in.at(1).get<int>());
          break;
        }
        case ModuleKind::Flatten:
          b.flatten(from);
          if (j.contains("permutation")) {
            auto& m = b.network().modules().back();
            m.permutation = j["permutation"].get<std::vector<int>>();
            if (static_cast<int>(m.permutation.size()) != m.in_shape.size()) {
              throw ValidationError("flatten permutation has wrong length");
            }
          }
          break;
        case ModuleKind::SoftmaxOutput: b.softmax(from); break;
      }
      if (j.contains("name")) b.network().modules().back().name = j["name"].get<std::string>();
      if (j.contains("out_shape") && !(shape_from_json(j["out_shape"]) == b.network().modules().back().out_shape)) {
        throw ValidationError("declared out_shape does not match computed shape");
      }
    } catch (const ValidationError& e) {
      throw ValidationError(e.what(), path);
    } catch (const Json::exception& e) {
      throw ValidationError(e.what(), path);
    }
  }
  return std::move(b).build();
}

namespace detail {

inline void put_f64le(std::vector<unsigned char>& out, double v) {
  std::uint64_t bits;
  std::memcpy(&bits, &v, sizeof bits);
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<unsigned char>((bits >> (8 * i)) & 0xffu));
}

inline double get_f64le(const unsigned char* p) {
  std::uint64_t bits = 0;
  for (int i = 0; i < 8; ++i) bits |= static_cast<std::uint64_t>(p[i]) << (8 * i);
  double v;
  std::memcpy(&v, &bits, sizeof v);
  return v;
}

template <typename F>
void for_each_tensor(Network& net, F&& f) {
  for (std::size_t mi = 0; mi < net.modules().size(); ++mi) {
    auto& m = net.modules()[mi];
    for (std::size_t pi = 0; pi < m.params.size(); ++pi) f(net.parameter_name(mi, pi), m.params[pi]);
    static const char* buffer_names[] = {"running_mean", "running_var"};
    for (std::size_t bi = 0; bi < m.buffers.size(); ++bi) f(m.name + "." + buffer_names[bi], m.buffers[bi]);
  }
}

}  // namespace detail

/// Writes all parameter and buffer tensors as one flat little-endian float64
/// blob plus a JSON index of {name, shape, offset} (offset in bytes).
inline void save_parameters(const Network& net, const std::string& bin_path, const std::string& index_path) {
  std::vector<unsigned char> blob;
  Json tensors = Json::array();
  Network copy = net;
  detail::for_each_tensor(copy, [&](const std::string& name, Matrix& t) {
    tensors.push_back(Json{{"name", name}, {"shape", {t.rows(), t.cols()}}, {"offset", blob.size()}});
    for (Eigen::Index k = 0; k < t.size(); ++k) detail::put_f64le(blob, t.data()[k]);
  });
  std::ofstream bin(bin_path, std::ios::binary);
  if (!bin) throw Error("cannot open " + bin_path);
  bin.write(reinterpret_cast<const char*>(blob.data()), static_cast<std::streamsize>(blob.size()));
  std::ofstream idx(index_path);
  if (!idx) throw Error("cannot open " + index_path);
  idx << Json{{"dtype", "float64"}, {"byte_order", "little"}, {"tensors", tensors}}.dump(2) << "\n";
}

inline void load_parameters(Network& net, const std::string& bin_path, const std::string& index_path) {
  std::ifstream idx(index_path);
  if (!idx) throw Error("cannot open " + index_path);
  Json index = Json::parse(idx);
  std::ifstream bin(bin_path, std::ios::binary);
  if (!bin) throw Error("cannot open " + bin_path);
  std::vector<unsigned char> blob((std::istreambuf_iterator<char>(bin)), std::istreambuf_iterator<char>());
  std::size_t k = 0;
  const auto& tensors = index.at("tensors");
  detail::for_each_tensor(net, [&](const std::string& name, Matrix& t) {
    if (k >= tensors.size()) throw ValidationError("index is missing tensors", name);
    const auto& e = tensors[k++];
    if (e.at("name").get<std::string>() != name) throw ValidationError("index tensor order mismatch", name);
    const auto shape = e.at("shape").get<std::vector<Eigen::Index>>();
    if (shape.size() != 2 || shape[0] != t.rows() || shape[1] != t.cols()) throw ValidationError("shape mismatch", name);
    const std::size_t off = e.at("offset").get<std::size_t>();
    if (off + static_cast<std::size_t>(t.size()) * 8 > blob.size()) throw ValidationError("tensor past end of file", name);
    for (Eigen::Index i = 0; i < t.size(); ++i) t.data()[i] = detail::get_f64le(blob.data() + off + static_cast<std::size_t>(i) * 8);
  });
  if (k != tensors.size()) throw ValidationError("index has extra tensors", index_path);
}

}  // namespace lop
