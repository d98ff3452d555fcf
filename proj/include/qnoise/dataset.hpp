#pragma once

#include "qnoise/rng.hpp"
#include "qnoise/train.hpp"

#include <filesystem>
#include <string>

namespace qnoise {

struct DataSplit {
    Dataset train;
    Dataset val;
};

struct MixtureConfig {
    std::size_t train = 4000;
    std::size_t val = 2000;
    std::size_t classes = 10;
    /// Standard deviation of each component around its center.
    double spread = 0.3;
    /// 1 puts one center per class on a ring of radius 1; more places that
    /// many centers per class uniformly in [-extent, extent]².
    std::size_t components = 1;
    double extent = 2.0;
};

/// 2-D Gaussian mixture with uniform labels. Centers come from rng.derive(0),
/// so a seed fixes the task as well as the samples.
DataSplit gaussian_mixture(const MixtureConfig& cfg, Rng& rng);

struct CharCorpus {
    std::string text;
    std::string vocab; // sorted distinct characters

    int index_of(char c) const;
};

/// Loads a text file; every character must be printable ASCII or a newline.
CharCorpus load_corpus(const std::filesystem::path& path);
std::filesystem::path default_corpus_path();

struct CharLmConfig {
    std::size_t context = 3;
    /// Examples taken from the start of the text; the last val_fraction goes to validation.
    std::size_t max_examples = 20000;
    double val_fraction = 0.1;
};

/// Next-character prediction: features are the one-hot codes of the previous
/// `context` characters, concatenated.
DataSplit char_lm_dataset(const CharCorpus& corpus, const CharLmConfig& cfg);

/// exp(mean cross-entropy).
double perplexity(double mean_loss);

} // namespace qnoise
