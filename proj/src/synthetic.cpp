#include "rsm/synthetic.hpp"

#include <cmath>

namespace rsm {

namespace {
constexpr double kTwoPi = 6.283185307179586476925286766559;
}

double SyntheticDatasetSpec::frequency_of(i64 cls) const {
    // geometric ladder from 2 cycles up to a quarter of the extent
    const double f_min = 2.0;
    const double f_max = std::max(f_min + 1.0, static_cast<double>(extent) / 4.0);
    if (num_classes == 1) return f_min;
    const double t = static_cast<double>(cls) / static_cast<double>(num_classes - 1);
    return f_min * std::pow(f_max / f_min, t);
}

double SyntheticDatasetSpec::orientation_of(i64 cls) const {
    return 3.14159265358979323846 * static_cast<double>(cls) / static_cast<double>(num_classes);
}

Sample generate_synthetic(const SyntheticDatasetSpec& spec, i64 index) {
    spec.validate();
    if (index < 0 || index >= spec.total())
        fail("generate_synthetic: index " + std::to_string(index) + " out of range [0," +
             std::to_string(spec.total()) + ")");
    const i64 cls = index % spec.num_classes;
    const double freq = spec.frequency_of(cls);
    const double theta = spec.orientation_of(cls);
    const double cos_t = std::cos(theta), sin_t = std::sin(theta);
    const i64 e = spec.extent;

    Rng rng(mix64(spec.seed, static_cast<u64>(index), 0x73796e7468ULL));
    const double phase = rng.uniform(0.0, kTwoPi);

    std::vector<float> img(static_cast<std::size_t>(e * e * 3));
    for (i64 y = 0; y < e; ++y)
        for (i64 x = 0; x < e; ++x) {
            const double u = (static_cast<double>(x) * cos_t + static_cast<double>(y) * sin_t) /
                             static_cast<double>(e);
            const double signal = spec.amplitude * std::sin(kTwoPi * freq * u + phase);
            for (i64 c = 0; c < 3; ++c) {
                const double noise = spec.noise_sigma > 0.0 ? rng.normal(0.0, spec.noise_sigma) : 0.0;
                img[static_cast<std::size_t>((y * e + x) * 3 + c)] = static_cast<float>(signal + noise);
            }
        }
    return Sample{Tensor<float>::from({e, e, 3}, std::move(img)), cls};
}

ChannelStats compute_channel_stats(const Dataset& data) {
    if (data.size() < 1) fail("compute_channel_stats: empty dataset");
    double sum[3] = {0, 0, 0};
    double sumsq[3] = {0, 0, 0};
    i64 count = 0;
    for (i64 i = 0; i < data.size(); ++i) {
        const auto sample = data.get(i);
        const float* p = sample.image.ptr();
        const i64 pixels = sample.image.numel() / 3;
        for (i64 j = 0; j < pixels; ++j)
            for (i64 c = 0; c < 3; ++c) {
                const double v = static_cast<double>(p[j * 3 + c]);
                sum[c] += v;
                sumsq[c] += v * v;
            }
        count += pixels;
    }
    ChannelStats stats;
    for (i64 c = 0; c < 3; ++c) {
        stats.mean[c] = sum[c] / static_cast<double>(count);
        const double var = sumsq[c] / static_cast<double>(count) - stats.mean[c] * stats.mean[c];
        stats.stddev[c] = var > 1e-12 ? std::sqrt(var) : 1.0;
    }
    return stats;
}

Tensor<float> normalize_image(const Tensor<float>& image, const ChannelStats& stats) {
    if (image.rank() != 3 || image.shape[2] != 3)
        fail("normalize_image: expected [H,W,3], got " + shape_str(image.shape));
    std::vector<float> out(static_cast<std::size_t>(image.numel()));
    const float* p = image.ptr();
    const i64 pixels = image.numel() / 3;
    for (i64 j = 0; j < pixels; ++j)
        for (i64 c = 0; c < 3; ++c)
            out[static_cast<std::size_t>(j * 3 + c)] = static_cast<float>(
                (static_cast<double>(p[j * 3 + c]) - stats.mean[c]) / stats.stddev[c]);
    return Tensor<float>::from(image.shape, std::move(out));
}

}  // namespace rsm
