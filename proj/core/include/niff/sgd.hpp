#pragma once

#include <vector>

#include "niff/tensor.hpp"

namespace niff {

struct SgdConfig {
    double learning_rate = 0.0;
    double momentum = 0.0;
    double weight_decay = 0.0;

    /// Throws ConfigError naming the offending field.
    void validate() const;
};

/// Classic momentum SGD with L2 regularization folded into the velocity:
///   v <- momentum * v + g + weight_decay * p
///   p <- p - lr * v
/// Parameters join in groups; each group scales the base learning rate.
class SgdOptimizer {
public:
    explicit SgdOptimizer(SgdConfig config);

    void add_parameters(const std::vector<Tensor>& params, double lr_scale = 1.0);
    std::size_t parameter_count() const { return entries_.size(); }

    void step();
    void zero_grad();

    const SgdConfig& config() const { return config_; }

private:
    struct Entry {
        Tensor param;
        std::vector<double> velocity;
        double lr_scale;
    };

    SgdConfig config_;
    std::vector<Entry> entries_;
};

}  // namespace niff
