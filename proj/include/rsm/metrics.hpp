#pragma once

#include <string>
#include <vector>

#include "rsm/common.hpp"

namespace rsm {

// Per-class precision/recall/F1 with unweighted macro averages and the raw
// confusion matrix (rows = true class, cols = predicted class).
struct MetricsReport {
    i64 num_classes = 0;
    std::vector<i64> confusion;  // num_classes * num_classes counts
    std::vector<double> precision, recall, f1;
    std::vector<char> in_macro;  // class participates in the macro means
    double macro_precision = 0.0, macro_recall = 0.0, macro_f1 = 0.0;
    double accuracy = 0.0;

    i64 at(i64 true_class, i64 pred_class) const {
        return confusion[static_cast<std::size_t>(true_class * num_classes + pred_class)];
    }
    std::string to_text() const;
};

// Zero-denominator convention: precision (or recall) is 0 when its
// denominator is 0; classes absent from both predictions and labels are
// dropped from the macro means.
MetricsReport macro_prf1(const std::vector<i64>& preds, const std::vector<i64>& labels,
                         i64 num_classes);

}  // namespace rsm
