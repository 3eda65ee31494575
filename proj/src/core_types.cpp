#include "foba/core_types.hpp"

#include <string>

#include "foba/errors.hpp"

namespace foba {

void validate_sample(const BiTemporalSample& s, int n_classes) {
    if (s.image_t1.rank() != 3)
        throw ShapeMismatch("sample " + s.id + ": image_t1 must be [C,H,W]");
    if (!s.image_t1.same_shape(s.image_t2))
        throw ShapeMismatch("sample " + s.id + ": image shapes differ: " +
                            s.image_t1.shape_str() + " vs " + s.image_t2.shape_str());
    const int h = s.image_t1.dim(1), w = s.image_t1.dim(2);
    if (h % 32 || w % 32)
        throw ShapeMismatch("sample " + s.id + ": " + std::to_string(h) + "x" +
                            std::to_string(w) + " not divisible by 32");
    auto check_map = [&](const auto& m, const char* name) {
        if (m.rank() != 2 || m.dim(0) != h || m.dim(1) != w)
            throw ShapeMismatch("sample " + s.id + ": " + name + " is " + m.shape_str() +
                                ", expected [" + std::to_string(h) + "," +
                                std::to_string(w) + "]");
    };
    check_map(s.sem_t1, "sem_t1");
    check_map(s.sem_t2, "sem_t2");
    check_map(s.change_mask, "change_mask");

    const int64_t n = s.sem_t1.numel();
    for (int64_t i = 0; i < n; ++i) {
        const int32_t a = s.sem_t1[i], b = s.sem_t2[i];
        if (a < 0 || a > n_classes || b < 0 || b > n_classes)
            throw LabelOutOfRange("sample " + s.id + ": label (" + std::to_string(a) +
                                  "," + std::to_string(b) + ") at pixel " +
                                  std::to_string(i) + " outside {0.." +
                                  std::to_string(n_classes) + "}");
        const uint8_t m = s.change_mask[i];
        if (m > 1)
            throw MaskInconsistent("sample " + s.id + ": mask value " +
                                   std::to_string(int(m)) + " at pixel " +
                                   std::to_string(i));
        const bool changed = (a != 0 || b != 0);
        if (changed != (m == 1))
            throw MaskInconsistent(
                "sample " + s.id + ": pixel " + std::to_string(i) + " has labels (" +
                std::to_string(a) + "," + std::to_string(b) + ") but mask " +
                std::to_string(int(m)));
    }
    for (int64_t i = 0; i < s.image_t1.numel(); ++i) {
        const float a = s.image_t1[i], b = s.image_t2[i];
        if (!(a >= 0.f && a <= 1.f && b >= 0.f && b <= 1.f))
            throw ShapeMismatch("sample " + s.id + ": image values outside [0,1]");
    }
}

template <typename T>
void MaskPair<T>::validate() const {
    if (!m_c.same_shape(m_uc) || m_c.rank() != 3 || m_c.dim(0) != 1)
        throw ShapeMismatch("mask pair must be two [1,h,w] tensors");
    for (int64_t i = 0; i < m_c.numel(); ++i) {
        if (!(m_c[i] >= T(0) && m_c[i] <= T(1)))
            throw MaskInconsistent("foreground mask value outside [0,1]");
        if (m_uc[i] != T(1) - m_c[i])
            throw MaskInconsistent("background mask is not the exact complement");
    }
}

template struct MaskPair<float>;
template struct MaskPair<double>;

SCDConfusionMatrix::SCDConfusionMatrix(int n_classes) : n_(n_classes) {
    if (n_ < 1) throw ConfigError("confusion matrix needs at least one class");
    q_.assign(static_cast<size_t>(n_) * n_, 0);
}

int64_t SCDConfusionMatrix::total() const {
    int64_t t = 0;
    for (int64_t v : q_) t += v;
    return t;
}

void SCDConfusionMatrix::accumulate(const Tensor<int32_t>& pred,
                                    const Tensor<int32_t>& gt) {
    if (!pred.same_shape(gt))
        throw ShapeMismatch("confusion accumulate: " + pred.shape_str() + " vs " +
                            gt.shape_str());
    for (int64_t i = 0; i < pred.numel(); ++i) {
        const int32_t p = pred[i], g = gt[i];
        if (p < 0 || p >= n_ || g < 0 || g >= n_)
            throw LabelOutOfRange("confusion accumulate: (" + std::to_string(p) + "," +
                                  std::to_string(g) + ") outside {0.." +
                                  std::to_string(n_ - 1) + "}");
        ++q_[static_cast<size_t>(p) * n_ + g];
    }
}

void SCDConfusionMatrix::merge(const SCDConfusionMatrix& other) {
    if (other.n_ != n_) throw ShapeMismatch("confusion merge: class counts differ");
    for (size_t i = 0; i < q_.size(); ++i) q_[i] += other.q_[i];
}

const char* to_string(FbgVariant v) {
    return v == FbgVariant::attention ? "attention" : "ssm";
}

FbgVariant fbg_variant_from_string(const std::string& s) {
    if (s == "attention") return FbgVariant::attention;
    if (s == "ssm") return FbgVariant::ssm;
    throw ConfigError("unknown decoder variant '" + s + "' (attention|ssm)");
}

FoBaConfig FoBaConfig::desk() { return FoBaConfig{}; }

FoBaConfig FoBaConfig::paper_scale() {
    FoBaConfig c;
    c.encoder_dims = {128, 256, 512, 1024};
    c.gif_dims = {128, 256, 512, 1024};
    c.fbg_dim = 128;
    c.ssm_state_dim = 16;
    return c;
}

void FoBaConfig::validate() const {
    if (n_classes < 1) throw ConfigError("n_classes must be >= 1");
    for (int i = 0; i < 4; ++i) {
        if (encoder_dims[static_cast<size_t>(i)] <= 0)
            throw ConfigError("encoder_dims must be positive");
        if (gif_dims[static_cast<size_t>(i)] != encoder_dims[static_cast<size_t>(i)])
            throw ConfigError("gif_dims must match encoder_dims per stage");
    }
    if (fbg_dim <= 0) throw ConfigError("fbg_dim must be positive");
    if (ssm_state_dim < 1) throw ConfigError("ssm_state_dim must be >= 1");
    if (gn_groups < 1) throw ConfigError("gn_groups must be >= 1");
    if (bottleneck_ratio < 1) throw ConfigError("bottleneck_ratio must be >= 1");
    if (blocks_per_stage < 1) throw ConfigError("blocks_per_stage must be >= 1");
    for (int i = 0; i < 4; ++i) {
        const int c = encoder_dims[static_cast<size_t>(i)];
        if (c % bottleneck_ratio)
            throw ConfigError("bottleneck_ratio must divide every stage width");
    }
    if (loss_weights.lambda1 < 0 || loss_weights.lambda2 < 0 ||
        loss_weights.lambda3 < 0 || loss_weights.lambda4 < 0)
        throw ConfigError("loss weights must be nonnegative");
}

}  // namespace foba
