#include "rsm/metrics.hpp"

#include <cstdio>
#include <sstream>

namespace rsm {

MetricsReport macro_prf1(const std::vector<i64>& preds, const std::vector<i64>& labels,
                         i64 num_classes) {
    if (preds.empty()) fail("macro_prf1: empty input");
    if (preds.size() != labels.size())
        fail("macro_prf1: " + std::to_string(preds.size()) + " predictions vs " +
             std::to_string(labels.size()) + " labels");
    if (num_classes < 1) fail("macro_prf1: need at least one class");

    MetricsReport rep;
    rep.num_classes = num_classes;
    rep.confusion.assign(static_cast<std::size_t>(num_classes * num_classes), 0);
    for (std::size_t i = 0; i < preds.size(); ++i) {
        const i64 p = preds[i], y = labels[i];
        if (p < 0 || p >= num_classes || y < 0 || y >= num_classes)
            fail("macro_prf1: class id out of range at sample " + std::to_string(i));
        ++rep.confusion[static_cast<std::size_t>(y * num_classes + p)];
    }

    rep.precision.assign(static_cast<std::size_t>(num_classes), 0.0);
    rep.recall.assign(static_cast<std::size_t>(num_classes), 0.0);
    rep.f1.assign(static_cast<std::size_t>(num_classes), 0.0);
    rep.in_macro.assign(static_cast<std::size_t>(num_classes), 0);

    i64 correct = 0;
    i64 macro_count = 0;
    for (i64 c = 0; c < num_classes; ++c) {
        const i64 tp = rep.at(c, c);
        i64 fp = 0, fn = 0;
        for (i64 o = 0; o < num_classes; ++o) {
            if (o == c) continue;
            fp += rep.at(o, c);
            fn += rep.at(c, o);
        }
        correct += tp;
        if (tp + fp + fn == 0) continue;  // absent from preds and labels
        rep.in_macro[static_cast<std::size_t>(c)] = 1;
        ++macro_count;
        const double p = tp + fp > 0 ? static_cast<double>(tp) / static_cast<double>(tp + fp) : 0.0;
        const double r = tp + fn > 0 ? static_cast<double>(tp) / static_cast<double>(tp + fn) : 0.0;
        const double f = p + r > 0.0 ? 2.0 * p * r / (p + r) : 0.0;
        rep.precision[static_cast<std::size_t>(c)] = p;
        rep.recall[static_cast<std::size_t>(c)] = r;
        rep.f1[static_cast<std::size_t>(c)] = f;
        rep.macro_precision += p;
        rep.macro_recall += r;
        rep.macro_f1 += f;
    }
    if (macro_count > 0) {
        rep.macro_precision /= static_cast<double>(macro_count);
        rep.macro_recall /= static_cast<double>(macro_count);
        rep.macro_f1 /= static_cast<double>(macro_count);
    }
    rep.accuracy = static_cast<double>(correct) / static_cast<double>(preds.size());
    return rep;
}

std::string MetricsReport::to_text() const {
    std::ostringstream os;
    char line[160];
    std::snprintf(line, sizeof(line), "%-8s %10s %10s %10s %10s\n", "class", "support", "P", "R",
                  "F1");
    os << line;
    for (i64 c = 0; c < num_classes; ++c) {
        i64 support = 0;
        for (i64 o = 0; o < num_classes; ++o) support += at(c, o);
        if (!in_macro[static_cast<std::size_t>(c)]) {
            std::snprintf(line, sizeof(line), "%-8lld %10lld %10s %10s %10s\n",
                          static_cast<long long>(c), static_cast<long long>(support), "-", "-", "-");
        } else {
            std::snprintf(line, sizeof(line), "%-8lld %10lld %10.4f %10.4f %10.4f\n",
                          static_cast<long long>(c), static_cast<long long>(support),
                          precision[static_cast<std::size_t>(c)], recall[static_cast<std::size_t>(c)],
                          f1[static_cast<std::size_t>(c)]);
        }
        os << line;
    }
    std::snprintf(line, sizeof(line), "%-8s %10s %10.4f %10.4f %10.4f\n", "macro", "", macro_precision,
                  macro_recall, macro_f1);
    os << line;
    std::snprintf(line, sizeof(line), "accuracy %.4f\n", accuracy);
    os << line;
    return os.str();
}

}  // namespace rsm
