#include "niff/sgd.hpp"

#include <string>

namespace niff {

void SgdConfig::validate() const {
    if (!(learning_rate > 0.0)) {
        throw ConfigError("learning_rate", "must be positive, got " + std::to_string(learning_rate));
    }
    if (!(momentum >= 0.0 && momentum < 1.0)) {
        throw ConfigError("momentum", "must lie in [0, 1), got " + std::to_string(momentum));
    }
    if (!(weight_decay >= 0.0)) {
        throw ConfigError("weight_decay", "must be non-negative, got " + std::to_string(weight_decay));
    }
}

SgdOptimizer::SgdOptimizer(SgdConfig config) : config_(config) { config_.validate(); }

void SgdOptimizer::add_parameters(const std::vector<Tensor>& params, double lr_scale) {
    if (!(lr_scale > 0.0)) {
        throw ConfigError("lr_scale", "must be positive, got " + std::to_string(lr_scale));
    }
    for (const auto& p : params) {
        if (!p.defined() || !p.requires_grad()) {
            throw ContractError("optimizer parameters must track gradients");
        }
        entries_.push_back({p, std::vector<double>(static_cast<std::size_t>(p.size()), 0.0), lr_scale});
    }
}

void SgdOptimizer::step() {
    for (auto& e : entries_) {
        const double lr = config_.learning_rate * e.lr_scale;
        auto pd = e.param.data_mut();
        const auto gd = e.param.grad();
        for (std::size_t i = 0; i < pd.size(); ++i) {
            e.velocity[i] = config_.momentum * e.velocity[i] + gd[i] + config_.weight_decay * pd[i];
            pd[i] -= lr * e.velocity[i];
        }
    }
}

void SgdOptimizer::zero_grad() {
    for (auto& e : entries_) e.param.zero_grad();
}

}  // namespace niff
