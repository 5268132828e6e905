#include "posediff/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <map>
#include <type_traits>

namespace posediff {

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

namespace {

constexpr char kMagic[4] = {'P', 'G', 'D', 'M'};

template <typename T>
void put(std::ostream& os, T v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T get(std::istream& is, const std::string& path) {
  T v{};
  if (!is.read(reinterpret_cast<char*>(&v), sizeof(T))) throw FormatError(path + ": truncated checkpoint");
  return v;
}

void put_string(std::ostream& os, const std::string& s) {
  put<std::uint32_t>(os, static_cast<std::uint32_t>(s.size()));
  os.write(s.data(), static_cast<std::streamsize>(s.size()));
}

std::string get_string(std::istream& is, const std::string& path, std::size_t limit) {
  const auto n = get<std::uint32_t>(is, path);
  if (n > limit) throw FormatError(path + ": string length " + std::to_string(n) + " out of range");
  std::string s(n, '\0');
  if (!is.read(s.data(), n)) throw FormatError(path + ": truncated checkpoint");
  return s;
}

template <typename S>
void put_tensor(std::ostream& os, const std::string& name, const Tensor<S>& t) {
  put_string(os, name);
  put<std::uint8_t>(os, std::is_same_v<S, float> ? 0 : 1);
  put<std::uint32_t>(os, static_cast<std::uint32_t>(t.rank()));
  for (auto d : t.shape()) put<std::uint64_t>(os, d);
  os.write(reinterpret_cast<const char*>(t.raw()), static_cast<std::streamsize>(t.numel() * sizeof(S)));
}

template <typename S, typename Stored>
Tensor<S> read_data(std::istream& is, const Shape& shape, const std::string& path) {
  Tensor<Stored> t(shape);
  if (!is.read(reinterpret_cast<char*>(t.raw()), static_cast<std::streamsize>(t.numel() * sizeof(Stored)))) {
    throw FormatError(path + ": truncated tensor data");
  }
  if constexpr (std::is_same_v<S, Stored>) {
    return t;
  } else {
    return t.template cast<S>();
  }
}

nlohmann::json header_json(const CheckpointHeader& h) {
  return nlohmann::json{{"model", h.model},
                        {"diffusion_steps", h.diffusion_steps},
                        {"variance_preserving", h.variance_preserving},
                        {"adam", {{"lr", h.adam.lr}, {"beta1", h.adam.beta1}, {"beta2", h.adam.beta2}, {"eps", h.adam.eps}}},
                        {"step", h.step},
                        {"rng_state", h.rng_state},
                        {"extra", h.extra}};
}

CheckpointHeader parse_header(const nlohmann::json& j) {
  CheckpointHeader h;
  h.model = j.at("model").get<DenoiserConfig>();
  h.diffusion_steps = j.at("diffusion_steps").get<std::size_t>();
  h.variance_preserving = j.at("variance_preserving").get<bool>();
  const auto& a = j.at("adam");
  h.adam.lr = a.at("lr").get<double>();
  h.adam.beta1 = a.at("beta1").get<double>();
  h.adam.beta2 = a.at("beta2").get<double>();
  h.adam.eps = a.at("eps").get<double>();
  h.step = j.at("step").get<std::int64_t>();
  h.rng_state = j.at("rng_state").get<std::string>();
  if (j.contains("extra")) h.extra = j.at("extra");
  return h;
}

}  // namespace

template <typename S>
void save_checkpoint(const std::filesystem::path& path, const Denoiser<S>& model, const Adam<S>* optimizer,
                     CheckpointHeader header) {
  header.model = model.config();
  if (optimizer) {
    header.step = optimizer->steps_taken();
    header.adam = optimizer->hyper();
  }
  const auto tmp = std::filesystem::path(path.string() + ".tmp");
  {
    std::ofstream os(tmp, std::ios::binary | std::ios::trunc);
    if (!os) throw IoFailure("cannot write " + tmp.string());
    os.write(kMagic, 4);
    put<std::uint32_t>(os, kCheckpointVersion);
    put_string(os, header_json(header).dump());
    const auto& named = model.named_parameters();
    const std::size_t count = named.size() * (optimizer ? 3 : 1);
    put<std::uint32_t>(os, static_cast<std::uint32_t>(count));
    for (const auto& [name, v] : named) put_tensor(os, name, v.value());
    if (optimizer) {
      const auto& moments = optimizer->moments();
      for (std::size_t i = 0; i < named.size(); ++i) put_tensor(os, "adam.m/" + named[i].first, moments[i].m);
      for (std::size_t i = 0; i < named.size(); ++i) put_tensor(os, "adam.v/" + named[i].first, moments[i].v);
    }
    if (!os) throw IoFailure("write failed for " + tmp.string());
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) throw IoFailure("cannot move checkpoint into place at " + path.string() + ": " + ec.message());
}

template <typename S>
Checkpoint<S> read_checkpoint(const std::filesystem::path& path) {
  const std::string p = path.string();
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoFailure("cannot open checkpoint " + p);
  char magic[4];
  if (!is.read(magic, 4) || std::memcmp(magic, kMagic, 4) != 0) throw FormatError(p + ": not a checkpoint (bad magic)");
  const auto version = get<std::uint32_t>(is, p);
  if (version != kCheckpointVersion) throw FormatError(p + ": unsupported checkpoint version " + std::to_string(version));
  Checkpoint<S> ckpt;
  try {
    ckpt.header = parse_header(nlohmann::json::parse(get_string(is, p, std::size_t{1} << 24)));
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(p + ": bad header: " + e.what());
  } catch (const Error& e) {
    throw FormatError(p + ": bad header: " + e.what());
  }
  const auto count = get<std::uint32_t>(is, p);
  for (std::uint32_t i = 0; i < count; ++i) {
    auto name = get_string(is, p, 4096);
    const auto dtype = get<std::uint8_t>(is, p);
    const auto rank = get<std::uint32_t>(is, p);
    if (rank > 8) throw FormatError(p + ": tensor " + name + " has rank " + std::to_string(rank));
    Shape shape(rank);
    std::size_t numel = 1;
    for (auto& d : shape) {
      d = get<std::uint64_t>(is, p);
      numel *= d;
      if (numel > (std::size_t{1} << 32)) throw FormatError(p + ": tensor " + name + " too large");
    }
    if (dtype == 0) ckpt.tensors.emplace_back(std::move(name), read_data<S, float>(is, shape, p));
    else if (dtype == 1) ckpt.tensors.emplace_back(std::move(name), read_data<S, double>(is, shape, p));
    else throw FormatError(p + ": tensor " + name + " has unknown dtype " + std::to_string(dtype));
  }
  if (is.peek() != std::ifstream::traits_type::eof()) throw FormatError(p + ": trailing bytes after tensors");
  return ckpt;
}

template <typename S>
Denoiser<S> load_model(const Checkpoint<S>& ckpt) {
  Denoiser<S> model(ckpt.header.model, 0);
  std::vector<std::pair<std::string, Tensor<S>>> params;
  for (const auto& [name, t] : ckpt.tensors) {
    if (name.rfind("adam.", 0) != 0) params.emplace_back(name, t);
  }
  model.load_parameters(params);
  return model;
}

template <typename S>
void load_optimizer(const Checkpoint<S>& ckpt, const Denoiser<S>& model, Adam<S>& optimizer) {
  std::map<std::string, const Tensor<S>*> by_name;
  for (const auto& [name, t] : ckpt.tensors) by_name[name] = &t;
  const auto& named = model.named_parameters();
  auto& moments = optimizer.moments();
  if (moments.size() != named.size()) throw FormatError("optimizer does not match the model");
  for (std::size_t i = 0; i < named.size(); ++i) {
    const auto m = by_name.find("adam.m/" + named[i].first);
    const auto v = by_name.find("adam.v/" + named[i].first);
    if (m == by_name.end() || v == by_name.end()) throw FormatError("checkpoint lacks optimizer state for " + named[i].first);
    if (m->second->shape() != named[i].second.shape() || v->second->shape() != named[i].second.shape()) {
      throw FormatError("optimizer state for " + named[i].first + " has the wrong shape");
    }
    moments[i].m = *m->second;
    moments[i].v = *v->second;
  }
  optimizer.set_steps_taken(ckpt.header.step);
}

#define POSEDIFF_INSTANTIATE_CHECKPOINT(S)                                                                       \
  template void save_checkpoint<S>(const std::filesystem::path&, const Denoiser<S>&, const Adam<S>*,             \
                                   CheckpointHeader);                                                           \
  template Checkpoint<S> read_checkpoint<S>(const std::filesystem::path&);                                       \
  template Denoiser<S> load_model<S>(const Checkpoint<S>&);                                                      \
  template void load_optimizer<S>(const Checkpoint<S>&, const Denoiser<S>&, Adam<S>&);

POSEDIFF_INSTANTIATE_CHECKPOINT(float)
POSEDIFF_INSTANTIATE_CHECKPOINT(double)

}  // namespace posediff
