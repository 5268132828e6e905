#include "posediff/sequence.hpp"

#include <algorithm>
#include <functional>
#include <map>
#include <optional>

#include "posediff/errors.hpp"

namespace posediff::sequence {

std::vector<std::size_t> prior_window(std::size_t target, std::size_t window) {
  const std::size_t first = (window == 0 || window >= target) ? 0 : target - window;
  std::vector<std::size_t> out;
  for (std::size_t j = first; j < target; ++j) out.push_back(j);
  return out;
}

std::size_t sample_source_view(std::span<const std::size_t> prior, Rng& rng) {
  if (prior.empty()) throw EmptyHistory("no prior frame to condition on");
  return prior[static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(prior.size()) - 1))];
}

const Tensor<float>& NoiseBank::noise(std::size_t k) const {
  if (!covers(k)) {
    throw StepOutOfRange("noise bank covers steps " + std::to_string(refresh_tail + 1) + ".." + std::to_string(steps) +
                         ", not " + std::to_string(k));
  }
  return noises[steps - k];
}

namespace {

Tensor<float> gaussian(const Shape& shape, Rng& rng) {
  Tensor<float> t(shape);
  for (auto& v : t.data()) v = static_cast<float>(rng.normal());
  return t;
}

}  // namespace

NoiseBank make_noise_bank(std::uint64_t seed, std::size_t steps, std::size_t refresh_tail, const Shape& shape) {
  if (refresh_tail > steps) {
    throw StepOutOfRange("t' = " + std::to_string(refresh_tail) + " exceeds " + std::to_string(steps) + " steps");
  }
  NoiseBank bank;
  bank.seed = seed;
  bank.shape = shape;
  bank.steps = steps;
  bank.refresh_tail = refresh_tail;
  Rng rng(seed);
  bank.x_T = gaussian(shape, rng);
  for (std::size_t k = steps; k > refresh_tail; --k) bank.noises.push_back(gaussian(shape, rng));
  return bank;
}

std::vector<double> interpolation_weights(std::span<const CameraPose> anchors, const CameraPose& target) {
  if (anchors.size() < 2) throw TooFewAnchors("interpolation needs at least 2 anchors, got " + std::to_string(anchors.size()));
  std::vector<double> w;
  double total = 0.0;
  for (const auto& a : anchors) {
    w.push_back(1.0 / ((a.center() - target.center()).norm() + 1e-6));
    total += w.back();
  }
  for (auto& v : w) v /= total;
  return w;
}

std::size_t sample_weighted(std::span<const double> weights, Rng& rng) {
  if (weights.empty()) throw EmptyHistory("no candidates to draw from");
  double total = 0.0;
  for (const double v : weights) total += v;
  double u = rng.uniform() * total;
  for (std::size_t i = 0; i < weights.size(); ++i) {
    if (u < weights[i]) return i;
    u -= weights[i];
  }
  return weights.size() - 1;
}

NoiseSchedule inference_schedule(std::size_t training_steps, const SamplerConfig& sampler) {
  sampler.validate(training_steps);
  return respace(cosine_schedule(training_steps), sampler.inference_steps);
}

Tensor<float> to_network(const Image& image) { return image.cast<float>(); }

Image from_network(const Tensor<float>& x) {
  Image out = x.cast<double>();
  for (auto& v : out.data()) v = std::clamp(v, -1.0, 1.0);
  return out;
}

namespace {

struct StepConditioning {
  std::vector<Var<float>> features;
  std::vector<Var<float>> weights;
};

// Respaced backward chain from x (N, C, H, W) down to step 0.
Tensor<float> run_chain(const GenerationContext& ctx, Tensor<float> x,
                        const std::function<Tensor<float>(std::size_t)>& noise_for,
                        const std::function<const StepConditioning&(std::size_t)>& condition_for) {
  NoGradGuard guard;
  const std::size_t n = x.dim(0);
  for (std::size_t k = ctx.schedule.steps(); k >= 1; --k) {
    const StepConditioning& cond = condition_for(k);
    const std::vector<std::size_t> ts(n, ctx.schedule.original_timestep(k));
    const auto eps = ctx.model.denoise(Var<float>::constant(x), ts, cond.features, cond.weights);
    const Tensor<float> noise = k > 1 ? noise_for(k) : x;
    x = ctx.sampler.clip_denoised ? backward_step_clipped(x, k, eps.value(), noise, ctx.schedule, ctx.form)
                                  : backward_step(x, k, eps.value(), noise, ctx.schedule);
  }
  return x;
}

Shape batch_shape(const Image& image) { return Shape{1, image.dim(0), image.dim(1), image.dim(2)}; }

void check_resolution(const DenoiserConfig& cfg, const Image& image) {
  if (image.rank() != 3 || image.dim(0) != cfg.in_channels || image.dim(1) != cfg.image_size ||
      image.dim(2) != cfg.image_size) {
    throw ShapeMismatch("image " + shape_str(image.shape()) + " does not match the model resolution " +
                        std::to_string(cfg.image_size));
  }
}

void check_shared_intrinsics(std::span<const CameraPose> poses, const CameraPose& reference) {
  for (const auto& p : poses) {
    if (!p.K().isApprox(reference.K(), 1e-12)) throw InvalidPose("all poses of a sequence must share intrinsics");
  }
}

// Features of each conditioning frame and weight matrices per (target, source) pair, computed once.
class ConditioningCache {
 public:
  explicit ConditioningCache(const Denoiser<float>& model) : model_(model) {}

  const StepConditioning& get(std::size_t source, const Image& source_image, const CameraPose& source_pose,
                              const CameraPose& target_pose) {
    NoGradGuard guard;
    auto& entry = pairs_[source];
    if (!entry) {
      auto feats = features_.find(source);
      if (feats == features_.end()) {
        const Tensor<float> x = to_network(source_image).reshaped(batch_shape(source_image));
        feats = features_.emplace(source, model_.encode_source(Var<float>::constant(x))).first;
      }
      StepConditioning c;
      c.features = feats->second;
      if (model_.config().attention == AttentionMode::epipolar) {
        const geometry::RelativePose rel = geometry::relative_pose(target_pose, source_pose);
        const geometry::Mat3 K = target_pose.K();
        c.weights = model_.weight_matrices(std::span(&rel, 1), std::span(&K, 1));
      }
      entry = std::move(c);
    }
    return *entry;
  }

  /// Forget per-target weight matrices; features stay cached.
  void next_target() { pairs_.clear(); }

 private:
  const Denoiser<float>& model_;
  std::map<std::size_t, std::vector<Var<float>>> features_;
  std::map<std::size_t, std::optional<StepConditioning>> pairs_;
};

}  // namespace

FrameSequence generate_sequence(const Image& x1, const std::vector<CameraPose>& poses, const GenerationContext& ctx,
                                std::uint64_t seed) {
  if (poses.empty()) throw PoseCountMismatch("a sequence needs at least the pose of the input frame");
  check_resolution(ctx.model.config(), x1);
  check_shared_intrinsics(poses, poses[0]);
  if (ctx.sampler.refresh_tail > ctx.schedule.steps()) {
    throw StepOutOfRange("t' exceeds the number of inference steps");
  }

  FrameSequence seq;
  seq.seed = seed;
  seq.config_hash = ctx.config_hash;
  seq.poses = poses;
  seq.frames.push_back(x1);
  seq.source_log.emplace_back();

  const NoiseBank bank = make_noise_bank(derive_seed(seed, 1), ctx.schedule.steps(), ctx.sampler.refresh_tail,
                                         batch_shape(x1));
  ConditioningCache cache(ctx.model);
  for (std::size_t i = 1; i < poses.size(); ++i) {
    const auto prior = prior_window(i, ctx.sampler.window);
    Rng fresh(derive_seed(seed, 0x10000 + i));
    Rng draws(derive_seed(seed, 0x20000 + i));
    std::vector<std::size_t> log;
    std::size_t per_frame = ctx.sampler.per_frame_source ? sample_source_view(prior, draws) : 0;
    cache.next_target();

    auto noise_for = [&](std::size_t k) { return bank.covers(k) ? bank.noise(k) : gaussian(bank.shape, fresh); };
    auto condition_for = [&](std::size_t) -> const StepConditioning& {
      const std::size_t j = ctx.sampler.per_frame_source ? per_frame : sample_source_view(prior, draws);
      log.push_back(j);
      return cache.get(j, seq.frames[j], poses[j], poses[i]);
    };
    const Tensor<float> x = run_chain(ctx, bank.x_T, noise_for, condition_for);
    seq.frames.push_back(from_network(x.reshaped(x1.shape())));
    seq.source_log.push_back(std::move(log));
  }
  return seq;
}

FrameSequence interpolate_views(const std::vector<std::pair<Image, CameraPose>>& anchors,
                                const std::vector<CameraPose>& targets, const GenerationContext& ctx,
                                std::uint64_t seed) {
  if (anchors.size() < 2) throw TooFewAnchors("interpolation needs at least 2 anchors, got " + std::to_string(anchors.size()));
  std::vector<CameraPose> anchor_poses;
  for (const auto& [image, pose] : anchors) {
    check_resolution(ctx.model.config(), image);
    anchor_poses.push_back(pose);
  }
  check_shared_intrinsics(anchor_poses, anchor_poses[0]);
  check_shared_intrinsics(targets, anchor_poses[0]);

  FrameSequence seq;
  seq.seed = seed;
  seq.config_hash = ctx.config_hash;
  seq.poses = targets;
  const Image& first = anchors[0].first;
  const NoiseBank bank = make_noise_bank(derive_seed(seed, 1), ctx.schedule.steps(), ctx.sampler.refresh_tail,
                                         batch_shape(first));
  ConditioningCache cache(ctx.model);
  for (std::size_t i = 0; i < targets.size(); ++i) {
    const auto weights = interpolation_weights(anchor_poses, targets[i]);
    Rng fresh(derive_seed(seed, 0x10000 + i));
    Rng draws(derive_seed(seed, 0x20000 + i));
    std::vector<std::size_t> log;
    cache.next_target();
    auto noise_for = [&](std::size_t k) { return bank.covers(k) ? bank.noise(k) : gaussian(bank.shape, fresh); };
    auto condition_for = [&](std::size_t) -> const StepConditioning& {
      const std::size_t j = sample_weighted(weights, draws);
      log.push_back(j);
      return cache.get(j, anchors[j].first, anchor_poses[j], targets[i]);
    };
    const Tensor<float> x = run_chain(ctx, bank.x_T, noise_for, condition_for);
    seq.frames.push_back(from_network(x.reshaped(first.shape())));
    seq.source_log.push_back(std::move(log));
  }
  return seq;
}

std::vector<Image> sample_views(const std::vector<Image>& sources,
                                const std::vector<geometry::RelativePose>& target_to_source, const geometry::Mat3& K,
                                const GenerationContext& ctx, std::uint64_t seed) {
  if (sources.size() != target_to_source.size()) {
    throw PoseCountMismatch(std::to_string(sources.size()) + " sources for " + std::to_string(target_to_source.size()) +
                            " poses");
  }
  if (sources.empty()) return {};
  std::vector<Tensor<float>> xs;
  for (const auto& s : sources) {
    check_resolution(ctx.model.config(), s);
    xs.push_back(to_network(s));
  }
  const Tensor<float> src = stack_images<float>(xs);
  StepConditioning cond;
  {
    NoGradGuard guard;
    cond.features = ctx.model.encode_source(Var<float>::constant(src));
    if (ctx.model.config().attention == AttentionMode::epipolar) {
      const std::vector<geometry::Mat3> Ks(sources.size(), K);
      cond.weights = ctx.model.weight_matrices(target_to_source, Ks);
    }
  }
  Rng rng(derive_seed(seed, 7));
  const Tensor<float> x_T = gaussian(src.shape(), rng);
  const Tensor<float> x = run_chain(
      ctx, x_T, [&](std::size_t) { return gaussian(src.shape(), rng); },
      [&](std::size_t) -> const StepConditioning& { return cond; });
  std::vector<Image> out;
  const std::size_t per = sources[0].numel();
  for (std::size_t n = 0; n < sources.size(); ++n) {
    Tensor<float> one(sources[0].shape());
    std::copy(x.raw() + n * per, x.raw() + (n + 1) * per, one.raw());
    out.push_back(from_network(one));
  }
  return out;
}

}  // namespace posediff::sequence
