#include "crowdsplat/metrics.hpp"

#include <cmath>

namespace crowdsplat {

void SsimConfig::validate() const {
    ValidationErrors errs;
    if (window < 1 || window % 2 == 0) errs.add("SSIM window must be odd and >= 1");
    if (!(sigma > 0.0)) errs.add("SSIM sigma must be > 0");
    if (!(max_value > 0.0)) errs.add("SSIM dynamic range must be > 0");
    if (!(c1() > 0.0) || !(c2() > 0.0)) errs.add("SSIM stabilizers C1, C2 must be > 0");
    errs.throw_if_any("invalid SSIM config");
}

double psnr(const ImageBuffer& a, const ImageBuffer& b, double max_value) {
    require_same_shape(a, b, "psnr");
    if (!(max_value > 0.0)) throw ValidationError("psnr: max value must be > 0");
    if (a.size() == 0) throw ValidationError("psnr: empty images");
    double sse = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        const double d = a.data()[i] - b.data()[i];
        sse += d * d;
    }
    const double mse = sse / static_cast<double>(a.size());
    if (mse == 0.0) return kPsnrInfinity;
    return 10.0 * std::log10(max_value * max_value / mse);
}

namespace {

std::vector<double> gaussian_kernel(int size, double sigma) {
    std::vector<double> k(size);
    const int r = size / 2;
    double sum = 0.0;
    for (int i = 0; i < size; ++i) {
        const double d = i - r;
        k[i] = std::exp(-d * d / (2.0 * sigma * sigma));
        sum += k[i];
    }
    for (double& v : k) v /= sum;
    return k;
}

// A single-channel plane.
struct Plane {
    int w = 0, h = 0;
    std::vector<double> v;

    Plane(int w, int h) : w(w), h(h), v(static_cast<std::size_t>(w) * h, 0.0) {}
    double& at(int x, int y) { return v[static_cast<std::size_t>(y) * w + x]; }
    double at(int x, int y) const { return v[static_cast<std::size_t>(y) * w + x]; }
};

Plane channel_plane(const ImageBuffer& img, int c) {
    Plane p(img.width(), img.height());
    for (int y = 0; y < img.height(); ++y)
        for (int x = 0; x < img.width(); ++x) p.at(x, y) = img.at(x, y, c);
    return p;
}

// Valid-window weighted sums: out(wx, wy) = sum_ij k[i] k[j] in(wx + i, wy + j).
Plane filter_valid(const Plane& in, const std::vector<double>& k) {
    const int n = static_cast<int>(k.size());
    Plane horiz(in.w - n + 1, in.h);
    for (int y = 0; y < in.h; ++y)
        for (int x = 0; x < horiz.w; ++x) {
            double acc = 0.0;
            for (int i = 0; i < n; ++i) acc += k[i] * in.at(x + i, y);
            horiz.at(x, y) = acc;
        }
    Plane out(horiz.w, in.h - n + 1);
    for (int y = 0; y < out.h; ++y)
        for (int x = 0; x < out.w; ++x) {
            double acc = 0.0;
            for (int i = 0; i < n; ++i) acc += k[i] * horiz.at(x, y + i);
            out.at(x, y) = acc;
        }
    return out;
}

// Adjoint of filter_valid: scatters per-window values back onto pixels.
Plane filter_adjoint(const Plane& win, const std::vector<double>& k) {
    const int n = static_cast<int>(k.size());
    const int w = win.w + n - 1, h = win.h + n - 1;
    Plane vert(win.w, h);
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < win.w; ++x) {
            double acc = 0.0;
            for (int i = 0; i < n; ++i) {
                const int wy = y - i;
                if (wy >= 0 && wy < win.h) acc += k[i] * win.at(x, wy);
            }
            vert.at(x, y) = acc;
        }
    Plane out(w, h);
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
            double acc = 0.0;
            for (int i = 0; i < n; ++i) {
                const int wx = x - i;
                if (wx >= 0 && wx < win.w) acc += k[i] * vert.at(wx, y);
            }
            out.at(x, y) = acc;
        }
    return out;
}

Plane product(const Plane& a, const Plane& b) {
    Plane out(a.w, a.h);
    for (std::size_t i = 0; i < a.v.size(); ++i) out.v[i] = a.v[i] * b.v[i];
    return out;
}

struct WindowStats {
    Plane mu_a, mu_b, var_a, var_b, cov;
};

WindowStats window_stats(const Plane& a, const Plane& b, const std::vector<double>& k) {
    Plane mu_a = filter_valid(a, k);
    Plane mu_b = filter_valid(b, k);
    Plane var_a = filter_valid(product(a, a), k);
    Plane var_b = filter_valid(product(b, b), k);
    Plane cov = filter_valid(product(a, b), k);
    for (std::size_t i = 0; i < mu_a.v.size(); ++i) {
        var_a.v[i] -= mu_a.v[i] * mu_a.v[i];
        var_b.v[i] -= mu_b.v[i] * mu_b.v[i];
        cov.v[i] -= mu_a.v[i] * mu_b.v[i];
    }
    return {std::move(mu_a), std::move(mu_b), std::move(var_a), std::move(var_b), std::move(cov)};
}

void check_ssim_inputs(const ImageBuffer& a, const ImageBuffer& b, const SsimConfig& cfg) {
    cfg.validate();
    require_same_shape(a, b, "ssim");
    if (a.width() < cfg.window || a.height() < cfg.window)
        throw ValidationError("ssim: image " + std::to_string(a.width()) + "x" + std::to_string(a.height())
                              + " is smaller than the " + std::to_string(cfg.window) + "px window");
}

}  // namespace

double ssim(const ImageBuffer& a, const ImageBuffer& b, const SsimConfig& cfg) {
    check_ssim_inputs(a, b, cfg);
    const auto k = gaussian_kernel(cfg.window, cfg.sigma);
    const double c1 = cfg.c1(), c2 = cfg.c2();
    double sum = 0.0;
    std::size_t count = 0;
    for (int c = 0; c < a.channels(); ++c) {
        const WindowStats s = window_stats(channel_plane(a, c), channel_plane(b, c), k);
        for (std::size_t i = 0; i < s.mu_a.v.size(); ++i) {
            const double ma = s.mu_a.v[i], mb = s.mu_b.v[i];
            const double num = (2.0 * ma * mb + c1) * (2.0 * s.cov.v[i] + c2);
            const double den = (ma * ma + mb * mb + c1) * (s.var_a.v[i] + s.var_b.v[i] + c2);
            sum += num / den;
        }
        count += s.mu_a.v.size();
    }
    return sum / static_cast<double>(count);
}

// With A1 = 2 ma mb + C1, A2 = 2 cov + C2, B1 = ma^2 + mb^2 + C1,
// B2 = va + vb + C2, S1 = A1 / B1, S2 = A2 / B2, each window contributes
//   g(k - w) * (alpha_w + beta_w * b_k + gamma_w * a_k)
// to d SSIM / d a_k. Written this way every term cancels exactly when a == b.
ImageBuffer ssim_grad(const ImageBuffer& a, const ImageBuffer& b, const SsimConfig& cfg) {
    check_ssim_inputs(a, b, cfg);
    const auto k = gaussian_kernel(cfg.window, cfg.sigma);
    const double c1 = cfg.c1(), c2 = cfg.c2();
    const std::size_t windows =
        static_cast<std::size_t>(a.width() - cfg.window + 1) * (a.height() - cfg.window + 1);
    const double scale = 1.0 / static_cast<double>(windows * a.channels());

    ImageBuffer grad(a.width(), a.height(), a.channels(), a.role());
    for (int c = 0; c < a.channels(); ++c) {
        const Plane pa = channel_plane(a, c), pb = channel_plane(b, c);
        const WindowStats s = window_stats(pa, pb, k);
        Plane alpha(s.mu_a.w, s.mu_a.h), beta(s.mu_a.w, s.mu_a.h), gamma(s.mu_a.w, s.mu_a.h);
        for (std::size_t i = 0; i < s.mu_a.v.size(); ++i) {
            const double ma = s.mu_a.v[i], mb = s.mu_b.v[i];
            const double a1 = 2.0 * ma * mb + c1;
            const double a2 = 2.0 * s.cov.v[i] + c2;
            const double b1 = ma * ma + mb * mb + c1;
            const double b2 = s.var_a.v[i] + s.var_b.v[i] + c2;
            const double s1 = a1 / b1, s2 = a2 / b2;
            const double inv = 2.0 / (b1 * b2);
            alpha.v[i] = inv * a2 * (mb - ma * s1) - inv * a1 * (mb - ma * s2);
            beta.v[i] = inv * a1;
            gamma.v[i] = -(inv * a1) * s2;
        }
        const Plane ga = filter_adjoint(alpha, k);
        const Plane gb = filter_adjoint(beta, k);
        const Plane gc = filter_adjoint(gamma, k);
        for (int y = 0; y < a.height(); ++y)
            for (int x = 0; x < a.width(); ++x)
                grad.at(x, y, c) = scale * (ga.at(x, y) + (pb.at(x, y) * gb.at(x, y) + pa.at(x, y) * gc.at(x, y)));
    }
    return grad;
}

double feature_distance(const ImageBuffer& a, const ImageBuffer& b, const FeatureExtractor& fx) {
    require_same_shape(a, b, "feature_distance");
    return feature_distance_from_features(fx.features(a), fx.features(b), fx.layer_weights());
}

double gram_loss(const ImageBuffer& a, const ImageBuffer& b, const FeatureExtractor& fx) {
    require_same_shape(a, b, "gram_loss");
    return gram_loss_from_features(fx.features(a), fx.features(b), fx.layer_weights());
}

void LossWeights::validate() const {
    ValidationErrors errs;
    const std::pair<const char*, double> all[] = {
        {"distill_rgb", distill_rgb},   {"distill_ssim", distill_ssim},   {"refiner_l2", refiner_l2},
        {"refiner_lpips", refiner_lpips}, {"refiner_ssim", refiner_ssim}, {"refiner_gram", refiner_gram},
        {"optim_ssim", optim_ssim}};
    for (const auto& [name, v] : all)
        if (!(v >= 0.0) || !std::isfinite(v)) errs.add(std::string(name) + " must be finite and >= 0");
    errs.throw_if_any("invalid loss weights");
}

nlohmann::json loss_weights_to_json(const LossWeights& w) {
    return {{"distill_rgb", w.distill_rgb},   {"distill_ssim", w.distill_ssim},   {"refiner_l2", w.refiner_l2},
            {"refiner_lpips", w.refiner_lpips}, {"refiner_ssim", w.refiner_ssim}, {"refiner_gram", w.refiner_gram},
            {"optim_ssim", w.optim_ssim}};
}

LossWeights loss_weights_from_json(const nlohmann::json& doc) {
    LossWeights w;
    try {
        w.distill_rgb = doc.value("distill_rgb", w.distill_rgb);
        w.distill_ssim = doc.value("distill_ssim", w.distill_ssim);
        w.refiner_l2 = doc.value("refiner_l2", w.refiner_l2);
        w.refiner_lpips = doc.value("refiner_lpips", w.refiner_lpips);
        w.refiner_ssim = doc.value("refiner_ssim", w.refiner_ssim);
        w.refiner_gram = doc.value("refiner_gram", w.refiner_gram);
        w.optim_ssim = doc.value("optim_ssim", w.optim_ssim);
    } catch (const nlohmann::json::exception& e) {
        throw ValidationError(std::string("malformed loss weights: ") + e.what());
    }
    w.validate();
    return w;
}

double self_distill_loss(const std::vector<ImageBuffer>& clean, const std::vector<ImageBuffer>& coarse,
                         double lambda_rgb, double lambda_ssim, const SsimConfig& cfg) {
    if (clean.size() != coarse.size())
        throw ValidationError("self_distill_loss: " + std::to_string(clean.size()) + " clean views vs "
                              + std::to_string(coarse.size()) + " coarse views");
    double total = 0.0;
    for (std::size_t v = 0; v < clean.size(); ++v) {
        require_same_shape(clean[v], coarse[v], "self_distill_loss view " + std::to_string(v));
        double sse = 0.0;
        for (std::size_t i = 0; i < clean[v].size(); ++i) {
            const double d = clean[v].data()[i] - coarse[v].data()[i];
            sse += d * d;
        }
        double term = lambda_rgb * std::sqrt(sse);
        if (lambda_ssim != 0.0) term += lambda_ssim * (1.0 - ssim(clean[v], coarse[v], cfg));
        total += term;
    }
    return total;
}

RefinerLoss refiner_loss(const ImageBuffer& out, const ImageBuffer& gt, const LossWeights& weights,
                         const FeatureExtractor& fx, const SsimConfig& cfg) {
    require_same_shape(out, gt, "refiner_loss");
    weights.validate();
    RefinerLoss r;
    double sse = 0.0;
    for (std::size_t i = 0; i < out.size(); ++i) {
        const double d = out.data()[i] - gt.data()[i];
        sse += d * d;
    }
    r.l2 = sse / static_cast<double>(out.size());
    r.lpips = feature_distance(out, gt, fx);
    r.ssim = 1.0 - ssim(out, gt, cfg);
    r.gram = gram_loss(out, gt, fx);
    r.total = weights.refiner_l2 * r.l2 + weights.refiner_lpips * r.lpips + weights.refiner_ssim * r.ssim
              + weights.refiner_gram * r.gram;
    return r;
}

OptimLoss optim_loss(const ImageBuffer& refined, const ImageBuffer& rendered, double lambda_ssim,
                     const SsimConfig& cfg) {
    require_same_shape(refined, rendered, "optim_loss");
    if (!(lambda_ssim >= 0.0)) throw ValidationError("optim_loss: lambda_ssim must be >= 0");
    OptimLoss r;
    r.grad = ImageBuffer(rendered.width(), rendered.height(), rendered.channels(), rendered.role());
    const double inv_count = 1.0 / static_cast<double>(rendered.size());
    double sad = 0.0;
    for (std::size_t i = 0; i < rendered.size(); ++i) {
        const double d = rendered.data()[i] - refined.data()[i];
        sad += std::abs(d);
        r.grad.data()[i] = d > 0.0 ? inv_count : (d < 0.0 ? -inv_count : 0.0);
    }
    r.l1 = sad * inv_count;
    r.loss = r.l1;
    if (lambda_ssim != 0.0) {
        r.ssim = ssim(rendered, refined, cfg);
        r.loss += lambda_ssim * (1.0 - r.ssim);
        const ImageBuffer g = ssim_grad(rendered, refined, cfg);
        for (std::size_t i = 0; i < g.size(); ++i) r.grad.data()[i] -= lambda_ssim * g.data()[i];
    } else {
        r.ssim = 1.0;  // not evaluated
    }
    return r;
}

}  // namespace crowdsplat
