#pragma once

#include <cmath>
#include <map>
#include <string>

#include "mnp/autodiff.hpp"

namespace mnp::opt {

struct AdamConfig {
    double lr = 1e-4;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double clip = 10.0;  // global gradient norm; <= 0 disables clipping
};

inline double global_norm(const ad::Grads& g) {
    double s = 0.0;
    for (const auto& [name, arr] : g)
        for (double v : arr.v) s += v * v;
    return std::sqrt(s);
}

// Adam with bias correction; state keyed by parameter name so the order of
// map iteration never affects the update.
class Adam {
  public:
    explicit Adam(AdamConfig cfg = {}) : cfg_(cfg) {}

    const AdamConfig& config() const { return cfg_; }
    std::size_t steps_taken() const { return t_; }

    void step(ad::ParamStore& ps, const ad::Grads& grads) {
        ++t_;
        double scale = 1.0;
        if (cfg_.clip > 0.0) {
            double norm = global_norm(grads);
            if (norm > cfg_.clip) scale = cfg_.clip / norm;
        }
        const double c1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
        const double c2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
        for (const auto& [name, garr] : grads) {
            Array& value = ps.value(name);
            require(value.same_shape(garr), "adam: gradient shape mismatch for " + name);
            Array& m = state(m_, name, garr);
            Array& v = state(v_, name, garr);
            for (std::size_t i = 0; i < garr.v.size(); ++i) {
                double g = garr.v[i] * scale;
                m.v[i] = cfg_.beta1 * m.v[i] + (1.0 - cfg_.beta1) * g;
                v.v[i] = cfg_.beta2 * v.v[i] + (1.0 - cfg_.beta2) * g * g;
                double mh = m.v[i] / c1;
                double vh = v.v[i] / c2;
                value.v[i] -= cfg_.lr * mh / (std::sqrt(vh) + cfg_.eps);
            }
        }
    }

  private:
    Array& state(std::map<std::string, Array>& slot, const std::string& name,
                 const Array& like) {
        auto it = slot.find(name);
        if (it == slot.end()) {
            Array z = like;
            for (double& v : z.v) v = 0.0;
            it = slot.emplace(name, std::move(z)).first;
        }
        return it->second;
    }

    AdamConfig cfg_;
    std::map<std::string, Array> m_, v_;
    std::size_t t_ = 0;
};

}  // namespace mnp::opt
