#pragma once

#include <vector>

#include "fedknow/knowledge.hpp"
#include "fedknow/linalg.hpp"

namespace fedknow {

/// Fraction of rows whose argmax (lowest index on ties) equals the label.
inline double test_accuracy(const std::vector<Vec>& predictions, const std::vector<std::size_t>& labels) {
    require_same_size(predictions.size(), labels.size(), "test_accuracy");
    if (predictions.empty()) throw std::invalid_argument("test_accuracy: empty test set");
    std::size_t hits = 0;
    for (std::size_t i = 0; i < predictions.size(); ++i) hits += argmax(predictions[i]) == labels[i] ? 1 : 0;
    return static_cast<double>(hits) / static_cast<double>(predictions.size());
}

inline double test_accuracy(const std::vector<std::size_t>& predicted, const std::vector<std::size_t>& labels) {
    require_same_size(predicted.size(), labels.size(), "test_accuracy");
    if (predicted.empty()) throw std::invalid_argument("test_accuracy: empty test set");
    std::size_t hits = 0;
    for (std::size_t i = 0; i < predicted.size(); ++i) hits += predicted[i] == labels[i] ? 1 : 0;
    return static_cast<double>(hits) / static_cast<double>(predicted.size());
}

/// Percentage of violation: fraction of rows whose predicted class falls
/// outside the R-KM range at that sample.
inline double pov(const std::vector<std::size_t>& predicted, const std::vector<LabelMask>& ranges) {
    require_same_size(predicted.size(), ranges.size(), "pov");
    if (predicted.empty()) throw std::invalid_argument("pov: empty test set");
    std::size_t bad = 0;
    for (std::size_t i = 0; i < predicted.size(); ++i) bad += ranges[i].contains(predicted[i]) ? 0 : 1;
    return static_cast<double>(bad) / static_cast<double>(predicted.size());
}

inline double pov(const std::vector<Vec>& predictions, const std::vector<LabelMask>& ranges) {
    std::vector<std::size_t> predicted;
    predicted.reserve(predictions.size());
    for (const Vec& p : predictions) predicted.push_back(argmax(p));
    return pov(predicted, ranges);
}

/// POV of a model given as a callable x -> prediction vector, against gr.
template <typename Model>
double pov(const Model& model, const RangeKM& gr, const std::vector<Vec>& test_features) {
    std::vector<std::size_t> predicted;
    std::vector<LabelMask> ranges;
    for (const Vec& x : test_features) {
        predicted.push_back(argmax(model(x)));
        ranges.push_back(gr(x));
    }
    return pov(predicted, ranges);
}

}  // namespace fedknow
