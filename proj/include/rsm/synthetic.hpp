#pragma once

#include <memory>

#include "rsm/dataset.hpp"
#include "rsm/rng.hpp"

namespace rsm {

// Class-conditioned sinusoid gratings plus Gaussian pixel noise. Class c gets
// a distinct (frequency, orientation) pair: frequencies on a geometric ladder
// (so classes stay separable by dominant frequency at sigma = 0), orientations
// evenly spaced over [0, pi). Phase is random per sample, so classifiers must
// key on spectral content rather than raw pixel values.
struct SyntheticDatasetSpec {
    i64 num_classes = 8;
    i64 samples_per_class = 32;
    i64 extent = 32;  // square images, extent x extent x 3
    u64 seed = 0;
    double noise_sigma = 0.0;
    double amplitude = 1.0;

    i64 total() const { return num_classes * samples_per_class; }
    double frequency_of(i64 cls) const;    // cycles per image extent
    double orientation_of(i64 cls) const;  // radians in [0, pi)

    void validate() const {
        if (num_classes < 1 || samples_per_class < 1) fail("SyntheticDatasetSpec: empty dataset");
        if (extent < 2) fail("SyntheticDatasetSpec: extent too small");
        if (noise_sigma < 0.0) fail("SyntheticDatasetSpec: negative noise");
    }
};

// Pure function of (spec, index). Labels cycle round-robin so any prefix of
// the dataset is class-balanced.
Sample generate_synthetic(const SyntheticDatasetSpec& spec, i64 index);

class SyntheticDataset final : public Dataset {
public:
    explicit SyntheticDataset(SyntheticDatasetSpec spec) : spec_(spec) { spec_.validate(); }
    i64 size() const override { return spec_.total(); }
    i64 num_classes() const override { return spec_.num_classes; }
    Sample get(i64 index) const override { return generate_synthetic(spec_, index); }
    const SyntheticDatasetSpec& spec() const { return spec_; }

private:
    SyntheticDatasetSpec spec_;
};

}  // namespace rsm
