#include "mrfn/losses.hpp"

#include <algorithm>
#include <numeric>
#include <stdexcept>

#include "mrfn/data.hpp"
#include "mrfn/optim.hpp"

namespace mrfn {

int ExtractorConfig::layer_count() const {
  return std::accumulate(stage_depths.begin(), stage_depths.end(), 0);
}

void ExtractorConfig::validate() const {
  if (stage_depths.empty() || stage_depths.size() != stage_widths.size()) {
    throw std::invalid_argument("extractor needs matching stage depth and width lists");
  }
  for (std::size_t i = 0; i < stage_depths.size(); ++i) {
    if (stage_depths[i] <= 0 || stage_widths[i] <= 0) {
      throw std::invalid_argument("extractor stage depths and widths must be positive");
    }
  }
}

PerceptualExtractor::PerceptualExtractor(const ExtractorConfig& cfg) : cfg_(cfg) {
  cfg_.validate();
  int in = 3;
  for (std::size_t s = 0; s < cfg_.stage_depths.size(); ++s) {
    for (int d = 0; d < cfg_.stage_depths[s]; ++d) {
      if (!cfg_.identity) convs.emplace_back(ConvSpec::same(in, cfg_.stage_widths[s], 3), cfg_.dtype);
      in = cfg_.stage_widths[s];
      pool_after_.push_back(!cfg_.identity && d + 1 == cfg_.stage_depths[s] &&
                            s + 1 < cfg_.stage_depths.size());
    }
  }
  if (!cfg_.identity) head = Conv2d(ConvSpec::same(in, 1, 1), cfg_.dtype);
}

ExtractorOutput PerceptualExtractor::features(const Tensor& x, int last_layer) const {
  if (last_layer < 1 || last_layer > layer_count()) {
    throw std::out_of_range("extractor layer " + std::to_string(last_layer) + " not in 1.." +
                            std::to_string(layer_count()));
  }
  ExtractorOutput out;
  Tensor h = x;
  for (int i = 0; i < last_layer; ++i) {
    if (!cfg_.identity) {
      if (i > 0 && pool_after_[i - 1]) {
        if (h.dim(2) % 2 != 0 || h.dim(3) % 2 != 0) {
          throw ShapeError("extractor input " + shape_str(x.shape()) +
                           " does not halve cleanly at layer " + std::to_string(i + 1));
        }
        h = maxpool2d(h, 2, 2);
      }
      h = relu(convs[i].forward(h));
    }
    out.taps.push_back(h);
    ++out.executed;
  }
  return out;
}

Tensor PerceptualExtractor::logits(const Tensor& x) const {
  if (cfg_.identity) throw std::logic_error("identity extractor has no classifier head");
  const auto f = features(x, layer_count());
  return head.forward(global_avg_pool(f.taps.back()));
}

bool PerceptualExtractor::frozen() const {
  if (!frozen_) return false;
  for (const auto& c : convs) {
    if (c.weight.requires_grad() || c.bias.requires_grad()) return false;
  }
  return !(head.weight.defined() && (head.weight.requires_grad() || head.bias.requires_grad()));
}

void PerceptualExtractor::freeze() {
  set_trainable(false);
  frozen_ = true;
}

void PerceptualExtractor::visit(const std::string& prefix, const ParamVisitor& fn) {
  for (std::size_t i = 0; i < convs.size(); ++i) {
    convs[i].visit(join_name(prefix, "conv" + std::to_string(i + 1)), fn);
  }
  if (!cfg_.identity) head.visit(join_name(prefix, "head"), fn);
}

void PerceptualExtractor::init(std::mt19937_64& rng) {
  for (auto& c : convs) c.init(rng);
  if (!cfg_.identity) head.init(rng);
}

// ---------------------------------------------------------------------------

namespace {

Tensor labels_like(const Tensor& logits, double value) {
  return Tensor::full(logits.shape(), value, logits.dtype());
}

}  // namespace

ProxyTrainResult train_proxy_classifier(PerceptualExtractor& extractor,
                                        const std::vector<ManifestEntry>& entries,
                                        const ProxyTrainOptions& options) {
  if (entries.size() < 2) {
    throw std::invalid_argument("proxy training needs at least two manifest entries");
  }
  if (options.epochs <= 0 || options.batch <= 0 || options.crop % 16 != 0 || options.crop <= 0) {
    throw std::invalid_argument("proxy options: epochs, batch > 0 and crop a multiple of 16");
  }
  std::vector<std::size_t> order(entries.size());
  std::iota(order.begin(), order.end(), 0);
  std::mt19937_64 split_rng(mix_seed(options.seed, 0x5117));
  std::shuffle(order.begin(), order.end(), split_rng);
  const std::size_t half = order.size() / 2;
  std::vector<ManifestEntry> train_entries, held_entries;
  for (std::size_t i = 0; i < order.size(); ++i) {
    (i < half ? held_entries : train_entries).push_back(entries[order[i]]);
  }
  const auto train = load_pairs(train_entries);
  const auto held = load_pairs(held_entries);

  std::mt19937_64 init_rng(options.seed);
  extractor.init(init_rng);
  extractor.set_trainable(true);
  Adam adam(extractor.named_parameters());
  const DType dt = extractor.config().dtype;
  // Each step sees `batch` crops of each class.
  const int steps_per_epoch = std::max<int>(1, static_cast<int>(train.size()) / options.batch);
  const int total = options.epochs * steps_per_epoch;
  double last_loss = 0.0;
  for (int step = 0; step < total; ++step) {
    std::mt19937_64 rng(mix_seed(options.seed, 1000 + step));
    const Batch b = sample_batch(train, options.batch, options.crop, Augment{true, true}, rng, dt);
    adam.zero_grad();
    const Tensor lh = extractor.logits(b.hazy);
    const Tensor lc = extractor.logits(b.clean);
    const Tensor loss = scale(add(bce_with_logits(lh, labels_like(lh, 1.0)),
                                  bce_with_logits(lc, labels_like(lc, 0.0))),
                              0.5);
    backward(loss);
    adam.step(cosine_lr(step, total, options.lr, options.lr * 0.01));
    last_loss = loss.item();
  }

  ProxyTrainResult result;
  result.train_loss = last_loss;
  NoGradGuard guard;
  int correct = 0, count = 0;
  for (const auto& p : held) {
    const int ch = p.clean.height / 16 * 16, cw = p.clean.width / 16 * 16;
    const Tensor h = image_to_tensor(crop_image(p.hazy, 0, 0, ch, cw), dt);
    const Tensor c = image_to_tensor(crop_image(p.clean, 0, 0, ch, cw), dt);
    correct += extractor.logits(h).item() > 0.0 ? 1 : 0;
    correct += extractor.logits(c).item() <= 0.0 ? 1 : 0;
    count += 2;
  }
  result.heldout_accuracy = static_cast<double>(correct) / count;
  result.heldout_count = count;
  extractor.freeze();
  return result;
}

// ---------------------------------------------------------------------------

std::string_view cr_variant_name(CRVariant v) {
  switch (v) {
    case CRVariant::None: return "none";
    case CRVariant::Original: return "originalCR";
    case CRVariant::DFCR: return "DFCR";
    case CRVariant::SIFCR: return "SIFCR";
  }
  return "?";
}

CRVariant parse_cr_variant(std::string_view name) {
  for (auto v : {CRVariant::None, CRVariant::Original, CRVariant::DFCR, CRVariant::SIFCR}) {
    if (cr_variant_name(v) == name) return v;
  }
  throw std::invalid_argument("unknown CR variant '" + std::string(name) +
                              "' (expected none, originalCR, DFCR or SIFCR)");
}

CRConfig CRConfig::make(CRVariant variant, double beta) {
  CRConfig c;
  c.variant = variant;
  c.beta = beta;
  switch (variant) {
    case CRVariant::None:
      c.taps.clear();
      c.weights.clear();
      c.beta = 0.0;
      break;
    case CRVariant::Original:
      c.taps = {1, 3, 5, 9, 13};
      c.weights = {1.0 / 32, 1.0 / 16, 1.0 / 8, 1.0 / 4, 1.0};
      break;
    case CRVariant::DFCR:
      c.taps = {1, 3, 5};
      c.weights = {1.0, 1.0, 1.0};
      break;
    case CRVariant::SIFCR:
      c.taps = {9, 13};
      c.weights = {1.5, 1.5};
      break;
  }
  return c;
}

int CRConfig::deepest_tap() const {
  return taps.empty() ? 0 : *std::max_element(taps.begin(), taps.end());
}

void CRConfig::validate() const {
  if (taps.size() != weights.size()) throw std::invalid_argument("CR taps and weights differ in length");
  for (int t : taps) {
    if (t < 1) throw std::invalid_argument("CR tap indices start at 1");
  }
  for (double w : weights) {
    if (!(w >= 0.0)) throw std::invalid_argument("CR weights must be non-negative");
  }
  if (!(epsilon > 0.0)) throw std::invalid_argument("CR epsilon must be positive");
  if (!(beta >= 0.0)) throw std::invalid_argument("CR beta must be non-negative");
}

CRResult cr_loss(const Tensor& O, const Tensor& J, const Tensor& I,
                 const PerceptualExtractor& extractor, const CRConfig& cfg) {
  cfg.validate();
  if (!extractor.frozen()) throw std::logic_error("cr_loss requires a frozen extractor");
  if (O.shape() != J.shape() || O.shape() != I.shape()) {
    throw ShapeError("cr_loss: O " + shape_str(O.shape()) + ", J " + shape_str(J.shape()) + ", I " +
                     shape_str(I.shape()) + " must match");
  }
  const int last = cfg.deepest_tap();
  if (last > extractor.layer_count()) {
    throw std::out_of_range("CR tap " + std::to_string(last) + " unavailable; extractor has " +
                            std::to_string(extractor.layer_count()) + " layers");
  }
  CRResult r;
  if (cfg.taps.empty()) {
    r.loss = Tensor::scalar(0.0, O.dtype());
    return r;
  }
  ExtractorOutput fj, fi;
  {
    NoGradGuard guard;
    fj = extractor.features(J.detach(), last);
    fi = extractor.features(I.detach(), last);
  }
  const ExtractorOutput fo = extractor.features(O, last);
  Tensor total;
  for (std::size_t k = 0; k < cfg.taps.size(); ++k) {
    const int t = cfg.taps[k] - 1;
    const Tensor pos = l1_mean(fj.taps[t], fo.taps[t]);
    const Tensor neg = add_scalar(l1_mean(fi.taps[t], fo.taps[t]), cfg.epsilon);
    const Tensor term = scale(div(pos, neg), cfg.weights[k]);
    total = total.defined() ? add(total, term) : term;
  }
  r.loss = total;
  r.executed = fo.executed;
  return r;
}

LossTerms total_loss(const Tensor& O, const Tensor& J, const Tensor& I,
                     const PerceptualExtractor* extractor, const CRConfig& cfg) {
  LossTerms t;
  const Tensor l1 = l1_mean(O, J);
  t.l1 = l1.item();
  if (!cfg.enabled()) {
    t.total = l1;
    return t;
  }
  if (extractor == nullptr) throw std::logic_error("CR enabled but no extractor supplied");
  const CRResult cr = cr_loss(O, J, I, *extractor, cfg);
  t.cr = cr.loss.item();
  t.total = add(l1, scale(cr.loss, cfg.beta));
  return t;
}

}  // namespace mrfn
