#pragma once

#include <cmath>
#include <functional>
#include <map>
#include <string>

#include "fedst/param_tree.hpp"

namespace fedst {

struct AdamConfig {
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 0.0; // decoupled decay; 0 reduces AdamW to Adam
};

/// AdamW with per-parameter first/second moments keyed by path and a shared
/// step counter. The caller zeroes gradients; step() only reads them.
class AdamW {
public:
    AdamW() = default;
    explicit AdamW(AdamConfig cfg) : cfg_(cfg) {}

    AdamConfig& config() { return cfg_; }
    const AdamConfig& config() const { return cfg_; }
    std::int64_t step_count() const { return step_; }

    /// One update over the parameters selected by `filter` (all when empty).
    /// Selected parameters must carry gradient buffers.
    void step(ParamTree& params,
              const std::function<bool(const std::string&)>& filter = {}) {
        ++step_;
        for (auto& [path, t] : params.entries()) {
            if (filter && !filter(path)) continue;
            update_tensor(path, t);
        }
    }

    /// Update a standalone tensor (e.g. a learnable descriptor outside any
    /// tree) under the current step counter. Call after step() in the same
    /// optimization cycle so the bias correction matches.
    void step_tensor(const std::string& key, Tensor& t) {
        if (step_ == 0) throw ContractError("step_tensor before any step()");
        update_tensor(key, t);
    }

private:
    struct Moments {
        std::vector<double> m, v;
    };

    void update_tensor(const std::string& path, Tensor& t) {
        if (!t.requires_grad() || !t.has_grad())
            throw ContractError("optimizer: parameter without gradient: " + path);
        auto& mo = state_[path];
        if (mo.m.empty()) {
            mo.m.assign(t.data().size(), 0.0);
            mo.v.assign(t.data().size(), 0.0);
        }
        if (mo.m.size() != t.data().size())
            throw ContractError("optimizer: moment shape drift at " + path);
        const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(step_));
        const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(step_));
        auto& w = t.data();
        const auto& g = t.grad();
        for (std::size_t i = 0; i < w.size(); ++i) {
            mo.m[i] = cfg_.beta1 * mo.m[i] + (1.0 - cfg_.beta1) * g[i];
            mo.v[i] = cfg_.beta2 * mo.v[i] + (1.0 - cfg_.beta2) * g[i] * g[i];
            const double mhat = mo.m[i] / bc1;
            const double vhat = mo.v[i] / bc2;
            w[i] -= cfg_.lr * (mhat / (std::sqrt(vhat) + cfg_.eps) + cfg_.weight_decay * w[i]);
        }
    }

    AdamConfig cfg_;
    std::map<std::string, Moments> state_;
    std::int64_t step_ = 0;
};

} // namespace fedst
