// Byte-level corpus handling: tokenization is the identity on bytes
// (vocab 256), train/val split at a fixed byte-offset fraction, sequential
// sequence batching with stream hashing for data-order comparisons.
#pragma once

#include "saew/common.hpp"

#include <fstream>
#include <string>
#include <vector>

namespace saew {

struct TokenBatch {
    IntMat ids;  // batch x seq_len

    Eigen::Index batch() const { return ids.rows(); }
    Eigen::Index seq_len() const { return ids.cols(); }
    Eigen::Index positions() const { return ids.size(); }

    std::vector<int32_t> flat() const {
        return std::vector<int32_t>(ids.data(), ids.data() + ids.size());
    }
    std::vector<int32_t> position_ids() const {
        std::vector<int32_t> p(static_cast<size_t>(ids.size()));
        for (Eigen::Index b = 0; b < ids.rows(); ++b)
            for (Eigen::Index s = 0; s < ids.cols(); ++s)
                p[static_cast<size_t>(b * ids.cols() + s)] = static_cast<int32_t>(s);
        return p;
    }
    // Next-token targets; the final position of each sequence has no target
    // and is marked -1 (excluded from CE).
    std::vector<int32_t> next_token_targets() const {
        std::vector<int32_t> t(static_cast<size_t>(ids.size()));
        for (Eigen::Index b = 0; b < ids.rows(); ++b) {
            for (Eigen::Index s = 0; s < ids.cols(); ++s) {
                t[static_cast<size_t>(b * ids.cols() + s)] =
                    (s + 1 < ids.cols()) ? ids(b, s + 1) : -1;
            }
        }
        return t;
    }
};

constexpr double kTrainFraction = 0.95;

class Corpus {
public:
    static Corpus from_file(const std::string& path) {
        std::ifstream f(path, std::ios::binary);
        if (!f.good()) throw ValidationError("cannot read corpus file: " + path);
        Corpus c;
        c.bytes_.assign(std::istreambuf_iterator<char>(f), std::istreambuf_iterator<char>());
        check_arg(!c.bytes_.empty(), "corpus file is empty: " + path);
        c.train_end_ = static_cast<size_t>(static_cast<double>(c.bytes_.size()) * kTrainFraction);
        return c;
    }
    static Corpus from_string(std::string text) {
        check_arg(!text.empty(), "corpus text is empty");
        Corpus c;
        c.bytes_.assign(text.begin(), text.end());
        c.train_end_ = static_cast<size_t>(static_cast<double>(c.bytes_.size()) * kTrainFraction);
        return c;
    }

    size_t train_tokens() const { return train_end_; }
    size_t val_tokens() const { return bytes_.size() - train_end_; }
    size_t total_tokens() const { return bytes_.size(); }

    int32_t train_token(size_t i) const { return static_cast<int32_t>(bytes_[i]); }
    int32_t val_token(size_t i) const { return static_cast<int32_t>(bytes_[train_end_ + i]); }

private:
    std::vector<unsigned char> bytes_;
    size_t train_end_ = 0;
};

enum class Split { Train, Val };

// Sequential, non-overlapping sequence drawer over one split. Deterministic;
// hashes every drawn token so runs can prove identical data order.
class SequenceStream {
public:
    SequenceStream(const Corpus& corpus, Split split, Eigen::Index seq_len)
        : corpus_(&corpus), split_(split), seq_len_(seq_len) {
        check_arg(seq_len_ >= 1, "sequence length must be >= 1");
    }

    size_t tokens_available() const {
        const size_t total = split_ == Split::Train ? corpus_->train_tokens()
                                                    : corpus_->val_tokens();
        return total - std::min(total, cursor_);
    }
    size_t tokens_drawn() const { return cursor_; }
    uint64_t stream_hash() const { return hash_.digest(); }
    std::string stream_hash_hex() const { return hash_.hex(); }

    // Draws n_seqs full sequences. Errors with the shortfall when the split
    // cannot supply them.
    TokenBatch next(Eigen::Index n_seqs) {
        const size_t need = static_cast<size_t>(n_seqs * seq_len_);
        if (tokens_available() < need) {
            throw ValidationError(
                "corpus split exhausted: requested " + std::to_string(need) + " tokens, " +
                std::to_string(tokens_available()) + " available (shortfall " +
                std::to_string(need - tokens_available()) + ")");
        }
        TokenBatch b;
        b.ids.resize(n_seqs, seq_len_);
        for (Eigen::Index s = 0; s < n_seqs; ++s) {
            for (Eigen::Index j = 0; j < seq_len_; ++j) {
                const size_t i = cursor_++;
                const int32_t tok = split_ == Split::Train ? corpus_->train_token(i)
                                                           : corpus_->val_token(i);
                b.ids(s, j) = tok;
                hash_.update_i32(tok);
            }
        }
        return b;
    }

    // Largest batch (<= max_seqs) the split can still supply; 0 rows if none.
    TokenBatch next_up_to(Eigen::Index max_seqs) {
        const Eigen::Index fit =
            static_cast<Eigen::Index>(tokens_available() / static_cast<size_t>(seq_len_));
        const Eigen::Index n = std::min(max_seqs, fit);
        if (n <= 0) {
            TokenBatch empty;
            empty.ids.resize(0, seq_len_);
            return empty;
        }
        return next(n);
    }

private:
    const Corpus* corpus_;
    Split split_;
    Eigen::Index seq_len_;
    size_t cursor_ = 0;
    StreamHash hash_;
};

}  // namespace saew
