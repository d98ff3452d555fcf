#include "qnoise/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iterator>
#include <numbers>
#include <set>

namespace qnoise {

namespace {

struct Center {
    double x, y;
};

// centers[c * components + j] is the j-th component of class c.
std::vector<Center> mixture_centers(const MixtureConfig& cfg, const Rng& rng) {
    std::vector<Center> out;
    if (cfg.components == 1) {
        for (std::size_t c = 0; c < cfg.classes; ++c) {
            const double angle = 2.0 * std::numbers::pi * double(c) / double(cfg.classes);
            out.push_back({std::cos(angle), std::sin(angle)});
        }
        return out;
    }
    Rng r = rng.derive(0);
    for (std::size_t i = 0; i < cfg.classes * cfg.components; ++i) {
        const double x = r.uniform(-cfg.extent, cfg.extent);
        out.push_back({x, r.uniform(-cfg.extent, cfg.extent)});
    }
    return out;
}

Dataset mixture_part(std::size_t n, const MixtureConfig& cfg, const std::vector<Center>& centers, Rng& rng) {
    Dataset d;
    d.classes = cfg.classes;
    d.x = Matrix(n, 2);
    d.y.resize(n);
    for (std::size_t i = 0; i < n; ++i) {
        const std::size_t c = rng.below(cfg.classes);
        const std::size_t j = cfg.components == 1 ? 0 : rng.below(cfg.components);
        const Center& ctr = centers[c * cfg.components + j];
        d.x(i, 0) = static_cast<float>(ctr.x + cfg.spread * rng.normal());
        d.x(i, 1) = static_cast<float>(ctr.y + cfg.spread * rng.normal());
        d.y[i] = int(c);
    }
    return d;
}

} // namespace

DataSplit gaussian_mixture(const MixtureConfig& cfg, Rng& rng) {
    if (cfg.classes < 2) throw std::invalid_argument("gaussian_mixture: need at least two classes");
    if (cfg.train == 0 || cfg.val == 0) throw std::invalid_argument("gaussian_mixture: empty split");
    if (!(cfg.spread > 0.0)) throw std::invalid_argument("gaussian_mixture: spread must be > 0");
    if (cfg.components == 0) throw std::invalid_argument("gaussian_mixture: components must be >= 1");
    const std::vector<Center> centers = mixture_centers(cfg, rng);
    DataSplit s;
    s.train = mixture_part(cfg.train, cfg, centers, rng);
    s.val = mixture_part(cfg.val, cfg, centers, rng);
    return s;
}

int CharCorpus::index_of(char c) const {
    const auto it = std::lower_bound(vocab.begin(), vocab.end(), c);
    if (it == vocab.end() || *it != c) return -1;
    return int(it - vocab.begin());
}

CharCorpus load_corpus(const std::filesystem::path& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("corpus file not found: " + path.string());
    CharCorpus c;
    c.text.assign(std::istreambuf_iterator<char>(f), std::istreambuf_iterator<char>());
    if (c.text.empty()) throw std::runtime_error("corpus file is empty: " + path.string());
    std::set<char> chars;
    for (char ch : c.text) {
        const bool printable = ch == '\n' || (ch >= 32 && ch < 127);
        if (!printable) throw std::runtime_error("corpus contains a non-printable byte: " + path.string());
        chars.insert(ch);
    }
    c.vocab.assign(chars.begin(), chars.end());
    return c;
}

std::filesystem::path default_corpus_path() { return std::filesystem::path(QNOISE_DATA_DIR) / "corpus.txt"; }

DataSplit char_lm_dataset(const CharCorpus& corpus, const CharLmConfig& cfg) {
    if (cfg.context == 0) throw std::invalid_argument("char_lm_dataset: context must be >= 1");
    if (!(cfg.val_fraction > 0.0 && cfg.val_fraction < 1.0)) {
        throw std::invalid_argument("char_lm_dataset: val_fraction must be in (0, 1)");
    }
    const std::size_t v = corpus.vocab.size();
    if (corpus.text.size() <= cfg.context + 1) throw std::invalid_argument("char_lm_dataset: corpus too short");
    const std::size_t n = std::min(cfg.max_examples, corpus.text.size() - cfg.context);
    const std::size_t n_val = std::max<std::size_t>(1, std::size_t(double(n) * cfg.val_fraction));
    const std::size_t n_train = n - n_val;
    if (n_train == 0) throw std::invalid_argument("char_lm_dataset: no training examples");

    auto build = [&](std::size_t begin, std::size_t count) {
        Dataset d;
        d.classes = v;
        d.x = Matrix(count, cfg.context * v);
        d.y.resize(count);
        for (std::size_t i = 0; i < count; ++i) {
            const std::size_t pos = begin + i;
            for (std::size_t k = 0; k < cfg.context; ++k) {
                d.x(i, k * v + std::size_t(corpus.index_of(corpus.text[pos + k]))) = 1.0f;
            }
            d.y[i] = corpus.index_of(corpus.text[pos + cfg.context]);
        }
        return d;
    };
    return {build(0, n_train), build(n_train, n_val)};
}

double perplexity(double mean_loss) { return std::exp(mean_loss); }

} // namespace qnoise
