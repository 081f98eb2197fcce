#include "mrfn/train.hpp"

#include <chrono>
#include <cmath>

#include "mrfn/checkpoint.hpp"
#include "mrfn/metrics.hpp"

namespace mrfn {

NonFiniteLoss::NonFiniteLoss(int step, const std::string& term, double value)
    : std::runtime_error("non-finite " + term + " loss (" + std::to_string(value) + ") at step " +
                         std::to_string(step)),
      step_(step),
      term_(term) {}

TrainSummary train_model(Model& model, const std::vector<ImagePair>& pairs, const TrainConfig& cfg,
                         const CRConfig& loss, const PerceptualExtractor* extractor,
                         const TrainHooks& hooks) {
  cfg.validate();
  if (loss.enabled() && extractor == nullptr) {
    throw std::invalid_argument("contrastive loss enabled but no proxy extractor loaded");
  }
  const auto t0 = std::chrono::steady_clock::now();
  Adam adam(model.named_parameters(), cfg.adam);
  TrainSummary summary;
  if (hooks.resume) {
    adam.import_state(load_checkpoint(model, hooks.checkpoint));
    summary.start_step = static_cast<int>(adam.steps());
  }
  const int end = hooks.stop_at >= 0 ? std::min(hooks.stop_at, cfg.iterations) : cfg.iterations;
  const DType dt = model.config().dtype;
  const Augment aug{cfg.rotate, cfg.flip};

  auto save = [&] {
    if (hooks.checkpoint.empty()) return;
    TensorTable extras;
    adam.export_state(extras);
    save_checkpoint(model, hooks.checkpoint, extras);
  };

  for (int step = summary.start_step; step < end; ++step) {
    std::mt19937_64 rng(mix_seed(cfg.seed, static_cast<std::uint64_t>(step)));
    const Batch batch = sample_batch(pairs, cfg.batch_size, cfg.crop_size, aug, rng, dt);
    adam.zero_grad();
    const Tensor out = model.forward(batch.hazy);
    const LossTerms terms = total_loss(out, batch.clean, batch.hazy, extractor, loss);
    if (!std::isfinite(terms.l1)) throw NonFiniteLoss(step + 1, "l1", terms.l1);
    if (!std::isfinite(terms.cr)) throw NonFiniteLoss(step + 1, "contrastive", terms.cr);
    const double total = terms.total.item();
    if (!std::isfinite(total)) throw NonFiniteLoss(step + 1, "total", total);
    backward(terms.total);
    const double lr = cosine_lr(step, cfg.iterations, cfg.lr_init, cfg.lr_final);
    adam.step(lr);
    const StepLog entry{step + 1, lr, total, terms.l1, terms.cr};
    if ((step + 1) % cfg.log_every == 0 || step + 1 == end) {
      summary.log.push_back(entry);
      if (hooks.on_log) hooks.on_log(entry);
    }
    if (cfg.checkpoint_every > 0 && (step + 1) % cfg.checkpoint_every == 0 && step + 1 != end) {
      save();
    }
  }
  summary.end_step = std::max(end, summary.start_step);
  save();
  summary.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return summary;
}

EvalSummary evaluate(const Model& model, const std::vector<ImagePair>& pairs, bool clamp) {
  EvalSummary s;
  NoGradGuard guard;
  for (const auto& p : pairs) {
    const Tensor x = image_to_tensor(p.hazy, model.config().dtype);
    const Tensor y = clamp ? model.infer(x) : model.forward(x);
    const Image out = tensor_to_image(y);
    const ImageScore score{p.id, psnr(out, p.clean), ssim(out, p.clean)};
    s.mean_psnr += score.psnr;
    s.mean_ssim += score.ssim;
    s.images.push_back(score);
  }
  if (!pairs.empty()) {
    s.mean_psnr /= static_cast<double>(pairs.size());
    s.mean_ssim /= static_cast<double>(pairs.size());
  }
  return s;
}

}  // namespace mrfn
