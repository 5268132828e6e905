#include "posediff/denoiser.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <string>

#include "posediff/ops.hpp"

namespace posediff {

std::size_t DenoiserConfig::channels(std::size_t level) const {
  return base_channels * channel_multiples.at(std::min(level, levels() - 1));
}

bool DenoiserConfig::has_attention(std::size_t level) const {
  const std::size_t r = resolution(level);
  return std::find(attention_resolutions.begin(), attention_resolutions.end(), r) != attention_resolutions.end();
}

std::vector<std::size_t> DenoiserConfig::attention_levels() const {
  std::vector<std::size_t> out;
  for (std::size_t l = 0; l <= levels(); ++l) {
    if (has_attention(l)) out.push_back(l);
  }
  return out;
}

void DenoiserConfig::validate() const {
  auto fail = [](const std::string& m) { throw InvalidConfig("denoiser: " + m); };
  if (image_size == 0) fail("image_size must be positive");
  if (in_channels == 0) fail("in_channels must be positive");
  if (base_channels == 0 || base_channels % 2 != 0) fail("base_channels must be positive and even");
  if (channel_multiples.empty()) fail("channel_multiples must not be empty");
  for (auto m : channel_multiples) {
    if (m == 0) fail("channel multiples must be positive");
  }
  if (res_blocks == 0) fail("res_blocks must be positive");
  if (groups == 0) fail("groups must be positive");
  if (image_size % (std::size_t{1} << levels()) != 0) {
    fail("image_size " + std::to_string(image_size) + " not divisible by 2^" + std::to_string(levels()));
  }
  for (auto r : attention_resolutions) {
    bool found = false;
    for (std::size_t l = 0; l <= levels(); ++l) found = found || resolution(l) == r;
    if (!found) fail("attention resolution " + std::to_string(r) + " is not a UNet level");
  }
  auto check_norm = [&](std::size_t c) {
    if (c % groups != 0) fail(std::to_string(c) + " channels not divisible into " + std::to_string(groups) + " groups");
  };
  for (std::size_t l = 0; l <= levels(); ++l) {
    check_norm(channels(l));
    if (has_attention(l) && (head_channels == 0 || channels(l) % head_channels != 0)) {
      fail("attention at level " + std::to_string(l) + " needs channels divisible by head_channels");
    }
  }
  std::size_t cur = channels(levels());
  for (std::size_t l = levels(); l-- > 0;) {
    check_norm(cur + channels(l));
    cur = channels(l);
  }
}

void to_json(nlohmann::json& j, const DenoiserConfig& c) {
  j = nlohmann::json{{"image_size", c.image_size},
                     {"in_channels", c.in_channels},
                     {"base_channels", c.base_channels},
                     {"channel_multiples", c.channel_multiples},
                     {"res_blocks", c.res_blocks},
                     {"attention_resolutions", c.attention_resolutions},
                     {"head_channels", c.head_channels},
                     {"groups", c.groups},
                     {"attention", c.attention == AttentionMode::epipolar ? "epipolar" : "cross_view"}};
}

void from_json(const nlohmann::json& j, DenoiserConfig& c) {
  if (!j.is_object()) throw InvalidConfig("denoiser config must be an object");
  for (const auto& [key, value] : j.items()) {
    if (key == "image_size") c.image_size = value.get<std::size_t>();
    else if (key == "in_channels") c.in_channels = value.get<std::size_t>();
    else if (key == "base_channels") c.base_channels = value.get<std::size_t>();
    else if (key == "channel_multiples") c.channel_multiples = value.get<std::vector<std::size_t>>();
    else if (key == "res_blocks") c.res_blocks = value.get<std::size_t>();
    else if (key == "attention_resolutions") c.attention_resolutions = value.get<std::vector<std::size_t>>();
    else if (key == "head_channels") c.head_channels = value.get<std::size_t>();
    else if (key == "groups") c.groups = value.get<std::size_t>();
    else if (key == "attention") {
      const auto mode = value.get<std::string>();
      if (mode == "epipolar") c.attention = AttentionMode::epipolar;
      else if (mode == "cross_view") c.attention = AttentionMode::cross_view;
      else throw InvalidValue("model.attention: expected \"epipolar\" or \"cross_view\", got \"" + mode + "\"");
    } else {
      throw UnknownKey("model." + key);
    }
  }
}

std::size_t parameter_count(const DenoiserConfig& cfg) {
  cfg.validate();
  const std::size_t b = cfg.base_channels, e = 4 * b, in = cfg.in_channels, L = cfg.levels();
  auto conv = [](std::size_t i, std::size_t o, std::size_t k) { return o * i * k * k + o; };
  auto norm = [](std::size_t c) { return 2 * c; };
  auto linear = [](std::size_t i, std::size_t o) { return i * o + o; };
  auto res = [&](std::size_t i, std::size_t o) {
    return norm(i) + conv(i, o, 3) + linear(e, 2 * o) + norm(o) + conv(o, o, 3) + (i != o ? conv(i, o, 1) : 0);
  };
  auto attn = [&](std::size_t c) { return 3 * norm(c) + 8 * c * c; };

  std::size_t total = linear(b, e) + linear(e, e) + conv(in, cfg.channels(0), 3);
  std::size_t cur = cfg.channels(0);
  for (std::size_t l = 0; l < L; ++l) {
    const std::size_t c = cfg.channels(l);
    total += res(cur, c) + (cfg.res_blocks - 1) * res(c, c);
    if (cfg.has_attention(l)) total += attn(c);
    total += conv(c, c, 3);
    cur = c;
  }
  total += 2 * res(cur, cur) + (cfg.has_attention(L) ? attn(cur) : 0);
  for (std::size_t l = L; l-- > 0;) {
    const std::size_t c = cfg.channels(l);
    total += res(cur + c, c) + (cfg.res_blocks - 1) * res(c, c);
    if (cfg.has_attention(l)) total += attn(c);
    cur = c;
  }
  total += norm(cur) + conv(cur, in, 3);
  total += conv(in, cfg.channels(0), 3);
  for (std::size_t l = 1; l <= L; ++l) total += conv(cfg.channels(l - 1), cfg.channels(l), 3) + conv(cfg.channels(l), cfg.channels(l), 3);
  return total;
}

template <typename S>
Tensor<S> timestep_embedding(std::span<const std::size_t> timesteps, std::size_t dim) {
  const std::size_t half = dim / 2;
  Tensor<S> out(Shape{timesteps.size(), dim});
  for (std::size_t n = 0; n < timesteps.size(); ++n) {
    const double t = static_cast<double>(timesteps[n]);
    for (std::size_t i = 0; i < half; ++i) {
      const double freq = std::exp(-std::log(10000.0) * static_cast<double>(i) / static_cast<double>(half));
      out[n * dim + i] = static_cast<S>(std::cos(t * freq));
      out[n * dim + half + i] = static_cast<S>(std::sin(t * freq));
    }
  }
  return out;
}

template <typename S>
Denoiser<S>::Denoiser(DenoiserConfig cfg, std::uint64_t seed) : cfg_(std::move(cfg)), init_rng_(seed) {
  cfg_.validate();
  const std::size_t b = cfg_.base_channels, e = cfg_.time_embedding_channels(), in = cfg_.in_channels;
  const std::size_t L = cfg_.levels();

  time1_ = make_linear("time.0", b, e);
  time2_ = make_linear("time.1", e, e);
  in_conv_ = make_conv("in", in, cfg_.channels(0), 3, 1);

  enc_res_.resize(L);
  enc_attn_.resize(L);
  std::size_t cur = cfg_.channels(0);
  for (std::size_t l = 0; l < L; ++l) {
    const std::size_t c = cfg_.channels(l);
    const std::string p = "down." + std::to_string(l);
    for (std::size_t r = 0; r < cfg_.res_blocks; ++r) {
      enc_res_[l].push_back(make_res(p + ".res." + std::to_string(r), r == 0 ? cur : c, c));
    }
    if (cfg_.has_attention(l)) enc_attn_[l] = make_attention(p + ".attn", c);
    down_.push_back(make_conv(p + ".downsample", c, c, 3, 2));
    cur = c;
  }
  mid1_ = make_res("mid.res.0", cur, cur);
  if (cfg_.has_attention(L)) mid_attn_ = make_attention("mid.attn", cur);
  mid2_ = make_res("mid.res.1", cur, cur);

  dec_res_.resize(L);
  dec_attn_.resize(L);
  for (std::size_t l = L; l-- > 0;) {
    const std::size_t c = cfg_.channels(l);
    const std::string p = "up." + std::to_string(l);
    for (std::size_t r = 0; r < cfg_.res_blocks; ++r) {
      dec_res_[l].push_back(make_res(p + ".res." + std::to_string(r), r == 0 ? cur + c : c, c));
    }
    if (cfg_.has_attention(l)) dec_attn_[l] = make_attention(p + ".attn", c);
    cur = c;
  }
  out_norm_ = make_norm("out.norm", cur);
  out_conv_ = make_conv("out.conv", cur, in, 3, 1, true);

  src_stem_ = make_conv("source.stem", in, cfg_.channels(0), 3, 1);
  for (std::size_t l = 1; l <= L; ++l) {
    const std::string p = "source." + std::to_string(l);
    src_down_.push_back(make_conv(p + ".downsample", cfg_.channels(l - 1), cfg_.channels(l), 3, 2));
    src_conv_.push_back(make_conv(p + ".conv", cfg_.channels(l), cfg_.channels(l), 3, 1));
  }
}

template <typename S>
Var<S> Denoiser<S>::add_param(const std::string& name, Tensor<S> value) {
  auto v = Var<S>::parameter(std::move(value));
  params_.emplace_back(name, v);
  return v;
}

template <typename S>
typename Denoiser<S>::Conv Denoiser<S>::make_conv(const std::string& name, std::size_t in, std::size_t out,
                                                   std::size_t k, std::size_t stride, bool zero) {
  Tensor<S> w(Shape{out, in, k, k});
  if (!zero) {
    const double sd = 1.0 / std::sqrt(static_cast<double>(in * k * k));
    for (auto& v : w.data()) v = static_cast<S>(init_rng_.normal() * sd);
  }
  Conv c;
  c.w = add_param(name + ".weight", std::move(w));
  c.b = add_param(name + ".bias", Tensor<S>(Shape{out}));
  c.stride = stride;
  c.pad = k / 2;
  return c;
}

template <typename S>
typename Denoiser<S>::Norm Denoiser<S>::make_norm(const std::string& name, std::size_t c) {
  Tensor<S> gamma(Shape{c});
  gamma.fill(S(1));
  Norm n;
  n.gamma = add_param(name + ".gamma", std::move(gamma));
  n.beta = add_param(name + ".beta", Tensor<S>(Shape{c}));
  return n;
}

template <typename S>
typename Denoiser<S>::Linear Denoiser<S>::make_linear(const std::string& name, std::size_t in, std::size_t out) {
  Tensor<S> w(Shape{in, out});
  const double sd = 1.0 / std::sqrt(static_cast<double>(in));
  for (auto& v : w.data()) v = static_cast<S>(init_rng_.normal() * sd);
  Linear l;
  l.w = add_param(name + ".weight", std::move(w));
  l.b = add_param(name + ".bias", Tensor<S>(Shape{1, out}));
  return l;
}

template <typename S>
typename Denoiser<S>::ResBlock Denoiser<S>::make_res(const std::string& name, std::size_t in, std::size_t out) {
  ResBlock r;
  r.norm1 = make_norm(name + ".norm1", in);
  r.conv1 = make_conv(name + ".conv1", in, out, 3, 1);
  r.modulation = make_linear(name + ".emb", cfg_.time_embedding_channels(), 2 * out);
  r.norm2 = make_norm(name + ".norm2", out);
  r.conv2 = make_conv(name + ".conv2", out, out, 3, 1);
  if (in != out) {
    r.has_skip = true;
    r.skip = make_conv(name + ".skip", in, out, 1, 1);
  }
  return r;
}

template <typename S>
typename Denoiser<S>::AttentionPair Denoiser<S>::make_attention(const std::string& name, std::size_t c) {
  AttentionPair a;
  a.self_norm = make_norm(name + ".self.norm", c);
  a.self = make_attention_params<S>(c, cfg_.head_channels, init_rng_, true);
  for (auto [suffix, m] : {std::pair{"wq", &a.self.wq}, {"wk", &a.self.wk}, {"wv", &a.self.wv}, {"wo", &a.self.wo}}) {
    params_.emplace_back(name + ".self." + suffix, *m);
  }
  a.target_norm = make_norm(name + ".cross.target_norm", c);
  a.source_norm = make_norm(name + ".cross.source_norm", c);
  a.cross = make_attention_params<S>(c, cfg_.head_channels, init_rng_, true);
  for (auto [suffix, m] : {std::pair{"wq", &a.cross.wq}, {"wk", &a.cross.wk}, {"wv", &a.cross.wv}, {"wo", &a.cross.wo}}) {
    params_.emplace_back(name + ".cross." + suffix, *m);
  }
  return a;
}

template <typename S>
std::vector<Var<S>> Denoiser<S>::parameters() const {
  std::vector<Var<S>> out;
  out.reserve(params_.size());
  for (const auto& [name, v] : params_) out.push_back(v);
  return out;
}

template <typename S>
std::size_t Denoiser<S>::parameter_count() const {
  std::size_t n = 0;
  for (const auto& [name, v] : params_) n += v.numel();
  return n;
}

template <typename S>
Var<S> Denoiser<S>::conv(const Conv& c, const Var<S>& x) const {
  return ops::conv2d(x, c.w, c.b, c.stride, c.pad);
}

template <typename S>
Var<S> Denoiser<S>::norm(const Norm& n, const Var<S>& x) const {
  return ops::group_norm(x, cfg_.groups, n.gamma, n.beta);
}

template <typename S>
Var<S> Denoiser<S>::linear(const Linear& l, const Var<S>& x) const {
  return ops::add(ops::matmul(x, l.w), l.b);
}

template <typename S>
Var<S> Denoiser<S>::res(const ResBlock& r, const Var<S>& x, const Var<S>& emb) const {
  auto h = conv(r.conv1, ops::silu(norm(r.norm1, x)));
  const std::size_t n = h.shape()[0], c = h.shape()[1];
  const auto mod = linear(r.modulation, emb);  // (N, 2C)
  const auto scale = ops::reshape(ops::slice(mod, 1, 0, c), Shape{n, c, 1, 1});
  const auto shift = ops::reshape(ops::slice(mod, 1, c, 2 * c), Shape{n, c, 1, 1});
  auto g = norm(r.norm2, h);
  g = ops::add(ops::add(g, ops::mul(g, scale)), shift);
  h = conv(r.conv2, ops::silu(g));
  return ops::add(r.has_skip ? conv(r.skip, x) : x, h);
}

template <typename S>
Var<S> Denoiser<S>::attend(const AttentionPair& a, const Var<S>& x, const Var<S>& source, const Var<S>* weights) const {
  auto h = ops::add(x, self_attention(norm(a.self_norm, x), a.self));
  const auto t = norm(a.target_norm, h);
  const auto s = norm(a.source_norm, source);
  if (cfg_.attention == AttentionMode::epipolar) {
    return ops::add(h, epipolar_attention(t, s, *weights, a.cross));
  }
  return ops::add(h, cross_view_attention(t, s, a.cross));
}

template <typename S>
std::vector<Var<S>> Denoiser<S>::encode_source(const Var<S>& x_src) const {
  const Shape& s = x_src.shape();
  if (s.size() != 4 || s[1] != cfg_.in_channels || s[2] != cfg_.image_size || s[3] != cfg_.image_size) {
    throw ShapeMismatch("source view " + shape_str(s) + " vs (N, " + std::to_string(cfg_.in_channels) + ", " +
                        std::to_string(cfg_.image_size) + ", " + std::to_string(cfg_.image_size) + ")");
  }
  std::vector<Var<S>> feats;
  auto h = ops::silu(conv(src_stem_, x_src));
  if (cfg_.has_attention(0)) feats.push_back(h);
  for (std::size_t l = 1; l <= cfg_.levels(); ++l) {
    h = ops::silu(conv(src_down_[l - 1], h));
    h = ops::silu(conv(src_conv_[l - 1], h));
    if (cfg_.has_attention(l)) feats.push_back(h);
  }
  return feats;
}

template <typename S>
Var<S> Denoiser<S>::denoise(const Var<S>& x_t, std::span<const std::size_t> timesteps,
                            const std::vector<Var<S>>& source_features, const std::vector<Var<S>>& weights) const {
  const Shape& s = x_t.shape();
  if (s.size() != 4 || s[1] != cfg_.in_channels || s[2] != cfg_.image_size || s[3] != cfg_.image_size) {
    throw ShapeMismatch("noisy view " + shape_str(s) + " vs (N, " + std::to_string(cfg_.in_channels) + ", " +
                        std::to_string(cfg_.image_size) + ", " + std::to_string(cfg_.image_size) + ")");
  }
  const std::size_t n = s[0];
  if (timesteps.size() != n) {
    throw ShapeMismatch("denoise: " + std::to_string(timesteps.size()) + " timesteps for batch of " + std::to_string(n));
  }
  const auto levels = cfg_.attention_levels();
  if (source_features.size() != levels.size()) {
    throw ShapeMismatch("denoise: " + std::to_string(source_features.size()) + " source feature maps, expected " +
                        std::to_string(levels.size()));
  }
  const bool epipolar = cfg_.attention == AttentionMode::epipolar;
  if (epipolar && weights.size() != levels.size()) {
    throw MissingWeightMatrix(std::to_string(weights.size()) + " weight matrices given, " +
                              std::to_string(levels.size()) + " attention resolutions");
  }
  // slot of each level in the per-resolution lists
  std::vector<int> slot(cfg_.levels() + 1, -1);
  for (std::size_t i = 0; i < levels.size(); ++i) {
    const std::size_t l = levels[i];
    const std::size_t r = cfg_.resolution(l), px = r * r;
    const Shape want{n, cfg_.channels(l), r, r};
    if (source_features[i].shape() != want) {
      throw ShapeMismatch("source features at " + std::to_string(r) + "x" + std::to_string(r) + ": " +
                          shape_str(source_features[i].shape()) + " vs " + shape_str(want));
    }
    if (epipolar) {
      const Shape& se = weights[i].shape();
      if (se.size() != 3 || (se[0] != n && se[0] != 1) || se[1] != px || se[2] != px) {
        throw ShapeMismatch("weight matrix at " + std::to_string(r) + "x" + std::to_string(r) + ": " + shape_str(se) +
                            " vs (" + std::to_string(n) + ", " + std::to_string(px) + ", " + std::to_string(px) + ")");
      }
    }
    slot[l] = static_cast<int>(i);
  }
  auto pair_at = [&](const AttentionPair& a, std::size_t l, const Var<S>& h) {
    const auto i = static_cast<std::size_t>(slot[l]);
    return attend(a, h, source_features[i], epipolar ? &weights[i] : nullptr);
  };

  const auto temb = Var<S>::constant(timestep_embedding<S>(timesteps, cfg_.base_channels));
  const auto emb = ops::silu(linear(time2_, ops::silu(linear(time1_, temb))));

  auto h = conv(in_conv_, x_t);
  std::vector<Var<S>> skips;
  for (std::size_t l = 0; l < cfg_.levels(); ++l) {
    for (const auto& r : enc_res_[l]) h = res(r, h, emb);
    if (slot[l] >= 0) h = pair_at(enc_attn_[l], l, h);
    skips.push_back(h);
    h = conv(down_[l], h);
  }
  h = res(mid1_, h, emb);
  if (slot[cfg_.levels()] >= 0) h = pair_at(mid_attn_, cfg_.levels(), h);
  h = res(mid2_, h, emb);
  for (std::size_t l = cfg_.levels(); l-- > 0;) {
    const std::size_t r = cfg_.resolution(l);
    h = ops::concat<S>({ops::bilinear_resize(h, r, r), skips[l]}, 1);
    for (const auto& rb : dec_res_[l]) h = res(rb, h, emb);
    if (slot[l] >= 0) h = pair_at(dec_attn_[l], l, h);
  }
  return conv(out_conv_, ops::silu(norm(out_norm_, h)));
}

template <typename S>
std::vector<Var<S>> Denoiser<S>::weight_matrices(std::span<const geometry::RelativePose> target_to_source,
                                                 std::span<const geometry::Mat3> K) const {
  if (K.size() != target_to_source.size()) {
    throw ShapeMismatch("weight_matrices: " + std::to_string(K.size()) + " intrinsics for " +
                        std::to_string(target_to_source.size()) + " poses");
  }
  std::vector<Var<S>> out;
  for (const std::size_t l : cfg_.attention_levels()) {
    const std::size_t r = cfg_.resolution(l);
    const double f = static_cast<double>(r) / static_cast<double>(cfg_.image_size);
    std::vector<geometry::EpipolarWeightMatrix> mats;
    mats.reserve(K.size());
    for (std::size_t i = 0; i < K.size(); ++i) {
      mats.push_back(geometry::epipolar_weight_matrix(target_to_source[i], geometry::scale_intrinsics(K[i], f, f), r, r));
    }
    out.push_back(weight_matrix_batch<S>(mats));
  }
  return out;
}

template <typename S>
void Denoiser<S>::load_parameters(const std::vector<std::pair<std::string, Tensor<S>>>& values) {
  std::map<std::string, const Tensor<S>*> by_name;
  for (const auto& [name, t] : values) by_name[name] = &t;
  for (auto& [name, v] : params_) {
    const auto it = by_name.find(name);
    if (it == by_name.end()) throw FormatError("checkpoint lacks parameter " + name);
    if (it->second->shape() != v.shape()) {
      throw FormatError("parameter " + name + ": stored " + shape_str(it->second->shape()) + " vs model " +
                        shape_str(v.shape()));
    }
    v.mutable_value() = *it->second;
    by_name.erase(it);
  }
  if (!by_name.empty()) throw FormatError("checkpoint has unknown parameter " + by_name.begin()->first);
}

template <typename S>
Tensor<S> stack_images(std::span<const Tensor<S>> images) {
  if (images.empty()) throw ShapeMismatch("cannot stack an empty batch");
  const Shape& s = images[0].shape();
  Shape out_shape{images.size()};
  out_shape.insert(out_shape.end(), s.begin(), s.end());
  Tensor<S> out(out_shape);
  const std::size_t per = images[0].numel();
  for (std::size_t i = 0; i < images.size(); ++i) {
    if (images[i].shape() != s) throw ShapeMismatch("stack: " + shape_str(images[i].shape()) + " vs " + shape_str(s));
    std::copy(images[i].raw(), images[i].raw() + per, out.raw() + i * per);
  }
  return out;
}

template <typename S>
Trainer<S>::Trainer(Denoiser<S>& model, NoiseSchedule schedule, ForwardNoise form, AdamHyper hyper, std::uint64_t seed)
    : model_(model),
      schedule_(std::move(schedule)),
      form_(form),
      optimizer_(model.parameters(), hyper),
      rng_(seed) {}

template <typename S>
Var<S> Trainer<S>::batch_loss(std::span<const TrainingExample<S>> batch, std::span<const std::size_t> timesteps,
                              std::span<const Tensor<S>> noises) const {
  std::vector<Tensor<S>> noisy, sources;
  std::vector<geometry::RelativePose> rels;
  std::vector<geometry::Mat3> Ks;
  for (std::size_t i = 0; i < batch.size(); ++i) {
    noisy.push_back(forward_marginal(batch[i].target, timesteps[i], noises[i], schedule_, form_));
    sources.push_back(batch[i].source);
    rels.push_back(batch[i].target_to_source);
    Ks.push_back(batch[i].K);
  }
  std::vector<std::size_t> original(timesteps.size());
  for (std::size_t i = 0; i < timesteps.size(); ++i) original[i] = schedule_.original_timestep(timesteps[i]);

  const auto x_t = Var<S>::constant(stack_images<S>(noisy));
  const auto x_src = Var<S>::constant(stack_images<S>(sources));
  std::vector<Var<S>> weights;
  if (model_.config().attention == AttentionMode::epipolar) weights = model_.weight_matrices(rels, Ks);
  const auto pred = model_.denoise(x_t, original, model_.encode_source(x_src), weights);
  return diffusion_loss(Var<S>::constant(stack_images<S>(noises)), pred);
}

template <typename S>
double Trainer<S>::train_step(std::span<const TrainingExample<S>> batch) {
  if (batch.empty()) throw ShapeMismatch("empty training batch");
  std::vector<std::size_t> ts(batch.size());
  std::vector<Tensor<S>> noises;
  for (std::size_t i = 0; i < batch.size(); ++i) {
    ts[i] = static_cast<std::size_t>(rng_.uniform_int(1, static_cast<std::int64_t>(schedule_.steps())));
    Tensor<S> eps(batch[i].target.shape());
    for (auto& v : eps.data()) v = static_cast<S>(rng_.normal());
    noises.push_back(std::move(eps));
  }
  const auto loss = batch_loss(batch, ts, noises);
  optimizer_.zero_grad();
  backward(loss);
  optimizer_.step();
  return static_cast<double>(loss.item());
}

template <typename S>
double Trainer<S>::evaluate(std::span<const TrainingExample<S>> batch, std::span<const std::size_t> timesteps,
                            std::span<const Tensor<S>> noises) const {
  if (timesteps.size() != batch.size() || noises.size() != batch.size()) {
    throw ShapeMismatch("evaluate: batch, timesteps and noises differ in length");
  }
  NoGradGuard guard;
  return static_cast<double>(batch_loss(batch, timesteps, noises).item());
}

#define POSEDIFF_INSTANTIATE_DENOISER(S)                                                       \
  template Tensor<S> timestep_embedding<S>(std::span<const std::size_t>, std::size_t);         \
  template class Denoiser<S>;                                                                  \
  template class Trainer<S>;                                                                   \
  template Tensor<S> stack_images<S>(std::span<const Tensor<S>>);

POSEDIFF_INSTANTIATE_DENOISER(float)
POSEDIFF_INSTANTIATE_DENOISER(double)

}  // namespace posediff
