#include "tipnet/params.hpp"

#include <fstream>

#include "tipnet/error.hpp"
#include "tipnet/volume.hpp"

namespace tipnet {

template <typename T>
ad::Tensor<T> ParamStore<T>::add(const std::string& name, ad::Shape shape, ParamKind kind,
                                 int fan_in, int fan_out) {
  if (index_.count(name)) throw ConfigError("duplicate parameter name '" + name + "'");
  const std::size_t n = ad::numel(shape);
  auto t = ad::Tensor<T>::variable(std::move(shape), std::vector<T>(n, T(0)));
  index_[name] = params_.size();
  params_.push_back({name, t, kind, fan_in, fan_out});
  return t;
}

template <typename T>
const Parameter<T>* ParamStore<T>::find(const std::string& name) const {
  auto it = index_.find(name);
  return it == index_.end() ? nullptr : &params_[it->second];
}

template <typename T>
std::vector<const Parameter<T>*> ParamStore<T>::with_prefix(const std::string& prefix) const {
  std::vector<const Parameter<T>*> out;
  for (const auto& p : params_) {
    if (p.name.compare(0, prefix.size(), prefix) == 0) out.push_back(&p);
  }
  return out;
}

template <typename T>
std::size_t ParamStore<T>::count() const {
  std::size_t n = 0;
  for (const auto& p : params_) n += p.tensor.size();
  return n;
}

template <typename T>
void ParamStore<T>::zero_grad() {
  for (auto& p : params_) p.tensor.zero_grad();
}

template <typename T>
template <typename U>
void ParamStore<T>::copy_values_from(const ParamStore<U>& other) {
  for (auto& p : params_) {
    const auto* src = other.find(p.name);
    if (!src || src->tensor.shape() != p.tensor.shape()) {
      throw ShapeError("copy_values_from: parameter '" + p.name + "' missing or reshaped");
    }
    auto dst = p.tensor.mutable_values();
    const auto from = src->tensor.values();
    for (std::size_t i = 0; i < dst.size(); ++i) dst[i] = static_cast<T>(from[i]);
  }
}

template class ParamStore<float>;
template class ParamStore<double>;
template void ParamStore<float>::copy_values_from(const ParamStore<double>&);
template void ParamStore<double>::copy_values_from(const ParamStore<float>&);
template void ParamStore<float>::copy_values_from(const ParamStore<float>&);
template void ParamStore<double>::copy_values_from(const ParamStore<double>&);

namespace {

std::filesystem::path with_ext(std::filesystem::path stem, const char* ext) {
  if (stem.extension() == ".json" || stem.extension() == ".f32") stem.replace_extension();
  stem += ext;
  return stem;
}

}  // namespace

void save_checkpoint(const std::filesystem::path& stem, const ParamStore<float>& params,
                     const nlohmann::json& metadata) {
  if (stem.empty()) throw IoError("checkpoint path is empty");
  const auto header_path = with_ext(stem, ".json");
  const auto payload_path = with_ext(stem, ".f32");
  nlohmann::json manifest;
  manifest["format"] = "tipnet-checkpoint";
  manifest["version"] = 1;
  manifest["dtype"] = "float32-le";
  manifest["payload"] = payload_path.filename().string();
  manifest["metadata"] = metadata;
  auto& entries = manifest["params"] = nlohmann::json::array();
  std::size_t offset = 0;
  for (const auto& p : params.params()) {
    entries.push_back({{"name", p.name}, {"shape", p.tensor.shape()}, {"offset", offset}});
    offset += p.tensor.size();
  }
  manifest["count"] = offset;

  std::ofstream payload(payload_path, std::ios::binary);
  if (!payload) throw IoError("cannot write " + payload_path.string());
  for (const auto& p : params.params()) write_f32_le(payload, p.tensor.values());
  if (!payload) throw IoError("write failed for " + payload_path.string());
  std::ofstream header(header_path);
  if (!header) throw IoError("cannot write " + header_path.string());
  header << manifest.dump(2) << '\n';
}

namespace {

nlohmann::json read_manifest(const std::filesystem::path& header_path) {
  std::ifstream header(header_path);
  if (!header) throw IoError("cannot read " + header_path.string());
  nlohmann::json manifest;
  try {
    header >> manifest;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError("manifest", std::string("invalid checkpoint manifest: ") + e.what());
  }
  if (!manifest.is_object() || manifest.value("format", "") != "tipnet-checkpoint") {
    throw FormatError("format", "not a tipnet checkpoint: " + header_path.string());
  }
  return manifest;
}

}  // namespace

nlohmann::json read_checkpoint_metadata(const std::filesystem::path& stem) {
  if (stem.empty()) throw IoError("checkpoint path is empty");
  return read_manifest(with_ext(stem, ".json")).value("metadata", nlohmann::json::object());
}

nlohmann::json load_checkpoint(const std::filesystem::path& stem, ParamStore<float>& params) {
  if (stem.empty()) throw IoError("checkpoint path is empty");
  const auto header_path = with_ext(stem, ".json");
  const nlohmann::json manifest = read_manifest(header_path);
  const auto& entries = manifest.at("params");
  if (entries.size() != params.params().size()) {
    throw FormatError("params", "checkpoint holds " + std::to_string(entries.size()) +
                                    " parameters, model expects " +
                                    std::to_string(params.params().size()));
  }
  const auto payload_path = header_path.parent_path() / manifest.at("payload").get<std::string>();
  std::ifstream payload(payload_path, std::ios::binary | std::ios::ate);
  if (!payload) throw IoError("cannot read " + payload_path.string());
  const auto bytes = static_cast<std::size_t>(payload.tellg());
  if (bytes != params.count() * 4) {
    throw FormatError("payload", "checkpoint payload has " + std::to_string(bytes) +
                                     " bytes, expected " + std::to_string(params.count() * 4));
  }
  payload.seekg(0);
  for (std::size_t i = 0; i < entries.size(); ++i) {
    auto& p = params.params()[i];
    const auto name = entries[i].at("name").get<std::string>();
    const auto shape = entries[i].at("shape").get<ad::Shape>();
    if (name != p.name || shape != p.tensor.shape()) {
      throw FormatError("params", "checkpoint entry " + name + " " + ad::to_string(shape) +
                                      " does not match model parameter " + p.name + " " +
                                      ad::to_string(p.tensor.shape()));
    }
    read_f32_le(payload, p.tensor.mutable_values());
  }
  return manifest.value("metadata", nlohmann::json::object());
}

}  // namespace tipnet
