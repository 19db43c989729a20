#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "pbbn/model.hpp"

namespace pbbn {

// ---------------------------------------------------------------------------
// Config, metrics, history
// ---------------------------------------------------------------------------

struct TrainConfig {
    int batch_size = 16;
    double learning_rate = 0.001;
    int max_epochs = 200;
    int early_stop_patience = 50;
    int folds = 15;
    std::uint64_t seed = 0;

    void validate() const {
        if (batch_size < 1 || learning_rate <= 0 || max_epochs < 1 || early_stop_patience < 1 || folds < 1)
            throw std::invalid_argument("train config: all fields must be positive");
        if (early_stop_patience > max_epochs)
            throw std::invalid_argument("train config: patience exceeds max_epochs");
    }
};

struct Confusion {
    long long tp = 0, tn = 0, fp = 0, fn = 0;
    long long total() const { return tp + tn + fp + fn; }
};

struct MetricValues {
    double precision = 0, recall = 0, f1 = 0;
    bool degenerate = false;  // some 0/0 denominator was coerced to 0
};

inline MetricValues metrics(const Confusion& c) {
    MetricValues m;
    if (c.tp + c.fp == 0) m.degenerate = true;
    else m.precision = static_cast<double>(c.tp) / static_cast<double>(c.tp + c.fp);
    if (c.tp + c.fn == 0) m.degenerate = true;
    else m.recall = static_cast<double>(c.tp) / static_cast<double>(c.tp + c.fn);
    if (m.precision + m.recall == 0) {
        m.f1 = 0;
        m.degenerate = true;
    } else {
        m.f1 = 2.0 * m.precision * m.recall / (m.precision + m.recall);
    }
    return m;
}

struct History {
    std::vector<double> train_loss, val_loss, val_f1;
    std::size_t best_epoch = 0;  // 0-based index into the vectors

    std::size_t epochs() const { return train_loss.size(); }

    std::string to_csv() const {
        std::ostringstream os;
        os << "epoch,train_loss,val_loss,val_f1\n";
        os.precision(10);
        for (std::size_t e = 0; e < epochs(); ++e)
            os << (e + 1) << ',' << train_loss[e] << ',' << val_loss[e] << ',' << val_f1[e] << '\n';
        return os.str();
    }
};

// ---------------------------------------------------------------------------
// Deterministic shuffling / k-fold splitting
// ---------------------------------------------------------------------------

namespace detail {

// Unbiased bounded draw; avoids the implementation-defined distributions so
// splits and shuffles are identical on every platform.
inline std::uint64_t bounded_rand(std::mt19937_64& rng, std::uint64_t bound) {
    const std::uint64_t threshold = (0 - bound) % bound;
    for (;;) {
        const std::uint64_t r = rng();
        if (r >= threshold) return r % bound;
    }
}

inline void shuffle_indices(std::vector<std::size_t>& idx, std::mt19937_64& rng) {
    for (std::size_t i = idx.size(); i > 1; --i)
        std::swap(idx[i - 1], idx[bounded_rand(rng, i)]);
}

}  // namespace detail

/// Disjoint validation index sets covering 0..n-1 exactly once; fold sizes
/// differ by at most one.
inline std::vector<std::vector<std::size_t>> kfold_split(std::size_t n_samples, int k, std::uint64_t seed) {
    if (k < 1 || static_cast<std::size_t>(k) > n_samples)
        throw std::invalid_argument("kfold_split: need 1 <= k <= n_samples");
    std::vector<std::size_t> idx(n_samples);
    for (std::size_t i = 0; i < n_samples; ++i) idx[i] = i;
    std::mt19937_64 rng(seed);
    detail::shuffle_indices(idx, rng);
    std::vector<std::vector<std::size_t>> folds(static_cast<std::size_t>(k));
    const std::size_t base = n_samples / k;
    const std::size_t extra = n_samples % k;
    std::size_t pos = 0;
    for (std::size_t f = 0; f < static_cast<std::size_t>(k); ++f) {
        const std::size_t len = base + (f < extra ? 1 : 0);
        folds[f].assign(idx.begin() + pos, idx.begin() + pos + len);
        pos += len;
    }
    return folds;
}

// ---------------------------------------------------------------------------
// Loss
// ---------------------------------------------------------------------------

/// Mean negative log of the true-class probability.
template <typename T>
double cross_entropy(const Tensor<T>& probs, const std::vector<int>& labels) {
    if (probs.rank() != 2 || probs.extent(0) != labels.size())
        throw std::invalid_argument("cross_entropy: probs/labels mismatch");
    const std::size_t n = probs.extent(0), classes = probs.extent(1);
    double loss = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        if (labels[i] < 0 || static_cast<std::size_t>(labels[i]) >= classes)
            throw std::invalid_argument("cross_entropy: label " + std::to_string(labels[i]) + " out of range");
        loss -= std::log(static_cast<double>(probs[i * classes + labels[i]]));
    }
    return loss / static_cast<double>(n);
}

/// Numerically stable cross entropy straight from logits (log-sum-exp form);
/// optionally emits d(loss)/d(logits).
template <typename T>
double cross_entropy_from_logits(const Tensor<T>& logits, const std::vector<int>& labels,
                                 Tensor<T>* dlogits = nullptr) {
    if (logits.rank() != 2 || logits.extent(0) != labels.size())
        throw std::invalid_argument("cross_entropy: logits/labels mismatch");
    const std::size_t n = logits.extent(0), classes = logits.extent(1);
    if (dlogits) *dlogits = Tensor<T>(logits.shape());
    double loss = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        const T* row = logits.data() + i * classes;
        const int y = labels[i];
        if (y < 0 || static_cast<std::size_t>(y) >= classes)
            throw std::invalid_argument("cross_entropy: label " + std::to_string(y) + " out of range");
        double mx = row[0];
        for (std::size_t j = 1; j < classes; ++j) mx = std::max(mx, static_cast<double>(row[j]));
        double sum = 0.0;
        for (std::size_t j = 0; j < classes; ++j) sum += std::exp(static_cast<double>(row[j]) - mx);
        const double lse = mx + std::log(sum);
        loss += lse - static_cast<double>(row[y]);
        if (dlogits) {
            T* drow = dlogits->data() + i * classes;
            for (std::size_t j = 0; j < classes; ++j) {
                const double p = std::exp(static_cast<double>(row[j]) - lse);
                drow[j] = static_cast<T>((p - (static_cast<std::size_t>(y) == j ? 1.0 : 0.0)) /
                                         static_cast<double>(n));
            }
        }
    }
    return loss / static_cast<double>(n);
}

// ---------------------------------------------------------------------------
// Adam
// ---------------------------------------------------------------------------

template <typename T>
class Adam {
public:
    Adam(std::vector<Tensor<T>*> params, double lr, double beta1 = 0.9, double beta2 = 0.999,
         double eps = 1e-8)
        : params_(std::move(params)), lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps) {
        for (Tensor<T>* p : params_) {
            m_.emplace_back(p->shape());
            v_.emplace_back(p->shape());
        }
    }

    void step(const std::vector<const Tensor<T>*>& grads) {
        if (grads.size() != params_.size()) throw std::invalid_argument("adam: gradient slot mismatch");
        ++t_;
        const double bc1 = 1.0 - std::pow(beta1_, t_);
        const double bc2 = 1.0 - std::pow(beta2_, t_);
        for (std::size_t s = 0; s < params_.size(); ++s) {
            Tensor<T>& p = *params_[s];
            const Tensor<T>& g = *grads[s];
            if (!p.same_shape(g)) throw std::invalid_argument("adam: gradient shape mismatch");
            Tensor<T>& m = m_[s];
            Tensor<T>& v = v_[s];
            for (std::size_t i = 0; i < p.size(); ++i) {
                const double gi = g[i];
                const double mi = beta1_ * m[i] + (1.0 - beta1_) * gi;
                const double vi = beta2_ * v[i] + (1.0 - beta2_) * gi * gi;
                m[i] = static_cast<T>(mi);
                v[i] = static_cast<T>(vi);
                p[i] = static_cast<T>(p[i] - lr_ * (mi / bc1) / (std::sqrt(vi / bc2) + eps_));
            }
        }
    }

private:
    std::vector<Tensor<T>*> params_;
    std::vector<Tensor<T>> m_, v_;
    double lr_, beta1_, beta2_, eps_;
    long long t_ = 0;
};

// ---------------------------------------------------------------------------
// Early stopping
// ---------------------------------------------------------------------------

class EarlyStopper {
public:
    explicit EarlyStopper(int patience) : patience_(patience) {}

    /// Feed one epoch's validation loss; returns true when training should
    /// stop (patience epochs without strict improvement).
    bool observe(double val_loss) {
        ++epoch_;
        if (val_loss < best_loss_) {
            best_loss_ = val_loss;
            best_epoch_ = epoch_;
            since_best_ = 0;
            return false;
        }
        ++since_best_;
        return since_best_ >= patience_;
    }

    bool improved_last() const { return since_best_ == 0; }
    std::size_t best_epoch() const { return best_epoch_; }  // 1-based
    double best_loss() const { return best_loss_; }

private:
    int patience_;
    int since_best_ = 0;
    std::size_t epoch_ = 0;
    std::size_t best_epoch_ = 0;
    double best_loss_ = std::numeric_limits<double>::infinity();
};

// ---------------------------------------------------------------------------
// In-memory dataset of preprocessed sequences
// ---------------------------------------------------------------------------

template <typename T>
struct Dataset {
    std::vector<Tensor<T>> sequences;  // each [H,W,T,C]
    std::vector<int> labels;           // 1 = blink, 0 = non-blink

    std::size_t size() const { return sequences.size(); }

    Dataset subset(const std::vector<std::size_t>& idx) const {
        Dataset out;
        out.sequences.reserve(idx.size());
        out.labels.reserve(idx.size());
        for (std::size_t i : idx) {
            out.sequences.push_back(sequences.at(i));
            out.labels.push_back(labels.at(i));
        }
        return out;
    }
};

template <typename T>
Tensor<T> stack_batch(const Dataset<T>& ds, const std::vector<std::size_t>& idx) {
    if (idx.empty()) throw std::invalid_argument("stack_batch: empty index list");
    const Shape& s = ds.sequences[idx[0]].shape();
    Shape bs{idx.size()};
    bs.insert(bs.end(), s.begin(), s.end());
    Tensor<T> batch(bs);
    const std::size_t per = ds.sequences[idx[0]].size();
    for (std::size_t i = 0; i < idx.size(); ++i) {
        const Tensor<T>& seq = ds.sequences[idx[i]];
        if (seq.shape() != s) throw std::invalid_argument("stack_batch: inconsistent sequence shapes");
        std::copy(seq.data(), seq.data() + per, batch.data() + i * per);
    }
    return batch;
}

// ---------------------------------------------------------------------------
// Evaluation and training
// ---------------------------------------------------------------------------

template <typename T>
struct EvalResult {
    double loss = 0;
    Confusion confusion;
};

template <typename T>
EvalResult<T> evaluate(Model<T>& model, const Dataset<T>& ds, int batch_size) {
    if (ds.size() == 0) throw std::invalid_argument("evaluate: empty dataset");
    EvalResult<T> r;
    double loss_sum = 0.0;
    for (std::size_t start = 0; start < ds.size(); start += batch_size) {
        std::vector<std::size_t> idx;
        for (std::size_t i = start; i < std::min(ds.size(), start + batch_size); ++i) idx.push_back(i);
        Tensor<T> batch = stack_batch(ds, idx);
        std::vector<int> labels;
        for (std::size_t i : idx) labels.push_back(ds.labels[i]);
        Tape<T> tape;
        (void)model.forward(batch, Mode::Infer, &tape);
        loss_sum += cross_entropy_from_logits(tape.logits, labels) * static_cast<double>(idx.size());
        const Tensor<T> probs = softmax_rows(tape.logits);
        for (std::size_t i = 0; i < idx.size(); ++i) {
            const int pred = probs[i * 2 + 1] > probs[i * 2] ? 1 : 0;
            if (labels[i] == 1) (pred == 1 ? r.confusion.tp : r.confusion.fn)++;
            else (pred == 1 ? r.confusion.fp : r.confusion.tn)++;
        }
    }
    r.loss = loss_sum / static_cast<double>(ds.size());
    return r;
}

namespace detail {

template <typename T>
std::vector<Tensor<T>> snapshot_state(Model<T>& m) {
    std::vector<Tensor<T>> state;
    m.visit_params(nullptr, [&state](const std::string&, Tensor<T>& p, Tensor<T>*) { state.push_back(p); });
    m.visit_buffers([&state](const std::string&, Tensor<T>& b) { state.push_back(b); });
    return state;
}

template <typename T>
void restore_state(Model<T>& m, const std::vector<Tensor<T>>& state) {
    std::size_t i = 0;
    m.visit_params(nullptr, [&](const std::string&, Tensor<T>& p, Tensor<T>*) { p = state.at(i++); });
    m.visit_buffers([&](const std::string&, Tensor<T>& b) { b = state.at(i++); });
    if (i != state.size()) throw std::logic_error("restore_state: slot count changed");
}

}  // namespace detail

/// Mini-batch Adam training with per-epoch seeded shuffling and early
/// stopping on validation loss; the parameters (and batch-norm buffers) of
/// the best-validation-loss epoch are restored before returning.
template <typename T>
History train(Model<T>& model, const Dataset<T>& train_set, const Dataset<T>& val_set,
              const TrainConfig& cfg) {
    cfg.validate();
    if (train_set.size() == 0 || val_set.size() == 0)
        throw std::invalid_argument("train: empty dataset");

    std::vector<Tensor<T>*> params;
    model.visit_params(nullptr,
                       [&params](const std::string&, Tensor<T>& p, Tensor<T>*) { params.push_back(&p); });
    Adam<T> adam(params, cfg.learning_rate);
    EarlyStopper stopper(cfg.early_stop_patience);
    std::mt19937_64 rng(cfg.seed);

    History hist;
    std::vector<Tensor<T>> best_state = detail::snapshot_state(model);

    std::vector<std::size_t> order(train_set.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;

    for (int epoch = 1; epoch <= cfg.max_epochs; ++epoch) {
        detail::shuffle_indices(order, rng);
        double loss_sum = 0.0;
        for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
            const std::size_t stop = std::min(order.size(), start + cfg.batch_size);
            std::vector<std::size_t> idx(order.begin() + start, order.begin() + stop);
            Tensor<T> batch = stack_batch(train_set, idx);
            std::vector<int> labels;
            for (std::size_t i : idx) labels.push_back(train_set.labels[i]);

            Tape<T> tape;
            (void)model.forward(batch, Mode::Train, &tape);
            Tensor<T> dlogits;
            const double loss = cross_entropy_from_logits(tape.logits, labels, &dlogits);
            loss_sum += loss * static_cast<double>(idx.size());
            ModelGrads<T> grads = model.backward(batch, tape, dlogits, Mode::Train);

            std::vector<const Tensor<T>*> gslots;
            model.visit_params(&grads, [&gslots](const std::string&, Tensor<T>&, Tensor<T>* g) {
                gslots.push_back(g);
            });
            adam.step(gslots);
        }

        const EvalResult<T> ev = evaluate(model, val_set, cfg.batch_size);
        hist.train_loss.push_back(loss_sum / static_cast<double>(train_set.size()));
        hist.val_loss.push_back(ev.loss);
        hist.val_f1.push_back(metrics(ev.confusion).f1);

        const bool stop = stopper.observe(ev.loss);
        if (stopper.improved_last()) best_state = detail::snapshot_state(model);
        if (stop) break;
    }

    detail::restore_state(model, best_state);
    hist.best_epoch = stopper.best_epoch() - 1;
    return hist;
}

// ---------------------------------------------------------------------------
// k-fold cross-validation
// ---------------------------------------------------------------------------

template <typename T>
struct FoldResult {
    Confusion confusion;
    MetricValues metric;
    History history;
};

template <typename T>
struct CrossValResult {
    std::vector<FoldResult<T>> folds;

    MetricValues mean() const {
        MetricValues m;
        for (const auto& f : folds) {
            m.precision += f.metric.precision;
            m.recall += f.metric.recall;
            m.f1 += f.metric.f1;
        }
        const double k = static_cast<double>(folds.size());
        m.precision /= k;
        m.recall /= k;
        m.f1 /= k;
        return m;
    }

    MetricValues stddev() const {
        const MetricValues mu = mean();
        MetricValues s;
        for (const auto& f : folds) {
            s.precision += (f.metric.precision - mu.precision) * (f.metric.precision - mu.precision);
            s.recall += (f.metric.recall - mu.recall) * (f.metric.recall - mu.recall);
            s.f1 += (f.metric.f1 - mu.f1) * (f.metric.f1 - mu.f1);
        }
        const double k = static_cast<double>(folds.size());
        s.precision = std::sqrt(s.precision / k);
        s.recall = std::sqrt(s.recall / k);
        s.f1 = std::sqrt(s.f1 / k);
        return s;
    }
};

/// Trains one fresh model per fold (validating and scoring on the held-out
/// fold) and collects per-fold metrics.
template <typename T>
CrossValResult<T> cross_validate(const PbbnConfig& model_cfg, const Dataset<T>& data, const TrainConfig& cfg) {
    const auto folds = kfold_split(data.size(), cfg.folds, cfg.seed);
    CrossValResult<T> result;
    for (std::size_t f = 0; f < folds.size(); ++f) {
        std::vector<std::size_t> train_idx;
        for (std::size_t g = 0; g < folds.size(); ++g)
            if (g != f) train_idx.insert(train_idx.end(), folds[g].begin(), folds[g].end());
        Model<T> model = Model<T>::build(model_cfg, cfg.seed + f);
        TrainConfig fold_cfg = cfg;
        fold_cfg.seed = cfg.seed + 1000 * (f + 1);
        FoldResult<T> fr;
        fr.history = train(model, data.subset(train_idx), data.subset(folds[f]), fold_cfg);
        const EvalResult<T> ev = evaluate(model, data.subset(folds[f]), cfg.batch_size);
        fr.confusion = ev.confusion;
        fr.metric = metrics(ev.confusion);
        result.folds.push_back(std::move(fr));
    }
    return result;
}

// ---------------------------------------------------------------------------
// Finite-difference gradient checking (64-bit models)
// ---------------------------------------------------------------------------

struct GradCheckIssue {
    std::string param;
    std::size_t index = 0;
    double analytic = 0, numeric = 0, rel_err = 0;
};

struct GradCheckReport {
    std::size_t checked = 0;
    double max_rel_err = 0;
    std::vector<GradCheckIssue> failures;
    bool ok() const { return failures.empty(); }
};

/// Train-mode cross-entropy loss of a batch; the scalar objective the
/// gradient check differentiates.
inline double training_loss(Model<double>& m, const Tensor<double>& x, const std::vector<int>& labels) {
    Tape<double> tape;
    (void)m.forward(x, Mode::Train, &tape);
    return cross_entropy_from_logits(tape.logits, labels);
}

/// Central finite differences against the analytic backward pass on `picks`
/// randomly chosen parameters.
inline GradCheckReport grad_check(Model<double>& m, const Tensor<double>& x, const std::vector<int>& labels,
                                  std::size_t picks, std::uint64_t seed, double h = 1e-5,
                                  double tol = 1e-4) {
    const std::vector<Tensor<double>> saved = detail::snapshot_state(m);

    Tape<double> tape;
    (void)m.forward(x, Mode::Train, &tape);
    Tensor<double> dlogits;
    (void)cross_entropy_from_logits(tape.logits, labels, &dlogits);
    ModelGrads<double> grads = m.backward(x, tape, dlogits, Mode::Train);

    struct Slot {
        std::string name;
        Tensor<double>* param;
        Tensor<double>* grad;
    };
    std::vector<Slot> slots;
    m.visit_params(&grads, [&slots](const std::string& name, Tensor<double>& p, Tensor<double>* g) {
        if (p.size() > 0) slots.push_back({name, &p, g});
    });

    std::size_t total = 0;
    for (const Slot& s : slots) total += s.param->size();

    std::mt19937_64 rng(seed);
    GradCheckReport report;
    for (std::size_t pick = 0; pick < picks; ++pick) {
        std::size_t flat = detail::bounded_rand(rng, total);
        std::size_t si = 0;
        while (flat >= slots[si].param->size()) flat -= slots[si++].param->size();
        Tensor<double>& p = *slots[si].param;
        const double orig = p[flat];
        p[flat] = orig + h;
        const double lp = training_loss(m, x, labels);
        p[flat] = orig - h;
        const double lm = training_loss(m, x, labels);
        p[flat] = orig;
        const double numeric = (lp - lm) / (2.0 * h);
        const double analytic = (*slots[si].grad)[flat];
        const double rel = std::fabs(analytic - numeric) /
                           std::max({std::fabs(analytic), std::fabs(numeric), 1e-8});
        report.max_rel_err = std::max(report.max_rel_err, rel);
        ++report.checked;
        if (rel >= tol) report.failures.push_back({slots[si].name, flat, analytic, numeric, rel});
    }

    detail::restore_state(m, saved);
    return report;
}

}  // namespace pbbn
