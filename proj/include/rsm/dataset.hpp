#pragma once

#include "rsm/tensor.hpp"

namespace rsm {

struct Sample {
    Tensor<float> image;  // [H, W, 3]
    i64 label = 0;
};

// Read-only sample source; get() must be pure and thread-safe.
class Dataset {
public:
    virtual ~Dataset() = default;
    virtual i64 size() const = 0;
    virtual i64 num_classes() const = 0;
    virtual Sample get(i64 index) const = 0;
};

// Per-channel normalization statistics, computed once at ingestion.
struct ChannelStats {
    double mean[3] = {0.0, 0.0, 0.0};
    double stddev[3] = {1.0, 1.0, 1.0};
};

ChannelStats compute_channel_stats(const Dataset& data);

// (x - mean) / stddev per channel.
Tensor<float> normalize_image(const Tensor<float>& image, const ChannelStats& stats);

}  // namespace rsm
