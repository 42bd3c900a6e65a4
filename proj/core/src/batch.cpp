#include "niff/batch.hpp"

#include "niff/serialize.hpp"

namespace niff {

namespace {
constexpr std::string_view kBatchMagic = "NIFFDATA";
}

void LabeledBatch::validate() const {
    if (empty()) {
        if (!labels.empty() || reg_targets.defined()) {
            throw ContractError("batch without features cannot carry labels or targets");
        }
        return;
    }
    if (features.ndim() != 4) {
        throw DimensionError("batch features must be [N,C,H,W], got " + shape_str(features.shape()));
    }
    if (static_cast<int>(labels.size()) != size()) {
        throw DimensionError("batch has " + std::to_string(labels.size()) + " labels for " +
                             std::to_string(size()) + " instances");
    }
    if (reg_targets.defined() && (reg_targets.ndim() != 2 || reg_targets.dim(0) != size())) {
        throw DimensionError("regression targets must be [N,r] matching the batch, got " +
                             shape_str(reg_targets.shape()));
    }
}

LabeledBatch LabeledBatch::instance(int i) const {
    if (i < 0 || i >= size()) throw ContractError("batch instance " + std::to_string(i) + " out of range");
    LabeledBatch out;
    Shape shape = features.shape();
    shape[0] = 1;
    const auto stride = static_cast<std::size_t>(features.size() / features.dim(0));
    const auto fd = features.data();
    out.features = Tensor::from_data(
        shape, std::vector<double>(fd.begin() + static_cast<std::ptrdiff_t>(stride * static_cast<std::size_t>(i)),
                                   fd.begin() + static_cast<std::ptrdiff_t>(stride * (static_cast<std::size_t>(i) + 1))));
    out.labels = {labels[static_cast<std::size_t>(i)]};
    if (reg_targets.defined()) {
        const int r = reg_targets.dim(1);
        const auto td = reg_targets.data();
        out.reg_targets = Tensor::from_data(
            {1, r}, std::vector<double>(td.begin() + static_cast<std::ptrdiff_t>(i) * r,
                                        td.begin() + static_cast<std::ptrdiff_t>(i + 1) * r));
    }
    return out;
}

void save_batch(const std::string& path, const LabeledBatch& batch) {
    batch.validate();
    BinaryWriter w(path);
    w.magic(kBatchMagic);
    if (batch.empty()) {
        w.u32(0);
        w.finish();
        return;
    }
    const auto& shape = batch.features.shape();
    w.u32(static_cast<std::uint32_t>(shape.size()));
    for (int d : shape) w.u32(static_cast<std::uint32_t>(d));
    w.f64_array(batch.features.data());
    for (int label : batch.labels) w.u32(static_cast<std::uint32_t>(label));
    if (batch.has_targets()) {
        w.u32(static_cast<std::uint32_t>(batch.reg_targets.dim(1)));
        w.f64_array(batch.reg_targets.data());
    } else {
        w.u32(0);
    }
    w.finish();
}

LabeledBatch load_batch(const std::string& path) {
    BinaryReader r(path);
    r.expect_magic(kBatchMagic);
    LabeledBatch batch;
    const auto ndim = r.u32();
    if (ndim == 0) {
        r.expect_eof();
        return batch;
    }
    if (ndim != 4) r.fail("batch features must be [N,C,H,W]");
    Shape shape(4);
    std::size_t count = 1;
    for (auto& d : shape) {
        d = static_cast<int>(r.u32());
        if (d <= 0 || d > (1 << 20)) r.fail("implausible batch dimension");
        count *= static_cast<std::size_t>(d);
    }
    batch.features = Tensor::from_data(shape, r.f64_array(count));
    batch.labels.resize(static_cast<std::size_t>(shape[0]));
    for (auto& label : batch.labels) label = static_cast<int>(r.u32());
    const auto r_dim = r.u32();
    if (r_dim > 0) {
        batch.reg_targets = Tensor::from_data({shape[0], static_cast<int>(r_dim)},
                                              r.f64_array(static_cast<std::size_t>(shape[0]) * r_dim));
    }
    r.expect_eof();
    batch.validate();
    return batch;
}

}  // namespace niff
