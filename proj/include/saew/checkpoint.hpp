// Tensor-table checkpoint container shared by every on-disk artifact
// (LM weights, SAE weights, adapters, activation shards).
//
// Layout, all little-endian:
//   magic "SAEW" | u32 format version | tensor entries until EOF
//   entry: u32 name length | name bytes (UTF-8) | u32 dtype code (0 = float64)
//          | u32 rank | rank x u64 dims | row-major float64 payload
#pragma once

#include "saew/common.hpp"

#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <utility>
#include <vector>

namespace saew {

constexpr uint32_t kCheckpointVersion = 1;
constexpr uint32_t kDtypeFloat64 = 0;

struct Tensor {
    std::vector<uint64_t> dims;  // empty = rank-0 scalar
    std::vector<double> data;

    uint64_t element_count() const {
        uint64_t n = 1;
        for (uint64_t d : dims) n *= d;
        return n;
    }
    static Tensor scalar(double v) { return Tensor{{}, {v}}; }
    static Tensor from_vec(const Vec& v) {
        Tensor t;
        t.dims = {static_cast<uint64_t>(v.size())};
        t.data.assign(v.data(), v.data() + v.size());
        return t;
    }
    static Tensor from_mat(const Mat& m) {
        Tensor t;
        t.dims = {static_cast<uint64_t>(m.rows()), static_cast<uint64_t>(m.cols())};
        t.data.assign(m.data(), m.data() + m.size());
        return t;
    }
    double as_scalar() const {
        check_runtime(data.size() == 1, "tensor is not a scalar");
        return data[0];
    }
    Vec as_vec() const {
        check_runtime(dims.size() <= 1, "tensor is not rank <= 1");
        return Eigen::Map<const Vec>(data.data(), static_cast<Eigen::Index>(data.size()));
    }
    Mat as_mat() const {
        check_runtime(dims.size() == 2, "tensor is not rank 2");
        return Eigen::Map<const Mat>(data.data(), static_cast<Eigen::Index>(dims[0]),
                                     static_cast<Eigen::Index>(dims[1]));
    }
};

// Ordered name -> tensor container. Entry order is preserved on disk so that
// save/load/save round-trips are byte-identical.
class TensorFile {
public:
    void add(const std::string& name, Tensor t) {
        check_arg(index_.find(name) == index_.end(), "duplicate tensor name: " + name);
        index_[name] = entries_.size();
        entries_.emplace_back(name, std::move(t));
    }
    void add_scalar(const std::string& name, double v) { add(name, Tensor::scalar(v)); }
    void add_vec(const std::string& name, const Vec& v) { add(name, Tensor::from_vec(v)); }
    void add_mat(const std::string& name, const Mat& m) { add(name, Tensor::from_mat(m)); }

    bool has(const std::string& name) const { return index_.count(name) > 0; }
    const Tensor& get(const std::string& name) const {
        auto it = index_.find(name);
        check_runtime(it != index_.end(), "missing tensor: " + name);
        return entries_[it->second].second;
    }
    double get_scalar(const std::string& name) const { return get(name).as_scalar(); }
    Vec get_vec(const std::string& name) const { return get(name).as_vec(); }
    Mat get_mat(const std::string& name) const { return get(name).as_mat(); }

    const std::vector<std::pair<std::string, Tensor>>& entries() const { return entries_; }

    void save(const std::string& path) const {
        std::ofstream out(path, std::ios::binary | std::ios::trunc);
        check_runtime(out.good(), "cannot open checkpoint for writing: " + path);
        out.write("SAEW", 4);
        write_u32(out, kCheckpointVersion);
        for (const auto& [name, t] : entries_) {
            write_u32(out, static_cast<uint32_t>(name.size()));
            out.write(name.data(), static_cast<std::streamsize>(name.size()));
            write_u32(out, kDtypeFloat64);
            write_u32(out, static_cast<uint32_t>(t.dims.size()));
            for (uint64_t d : t.dims) write_u64(out, d);
            out.write(reinterpret_cast<const char*>(t.data.data()),
                      static_cast<std::streamsize>(t.data.size() * sizeof(double)));
        }
        check_runtime(out.good(), "checkpoint write failed: " + path);
    }

    static TensorFile load(const std::string& path) {
        std::ifstream in(path, std::ios::binary);
        check_runtime(in.good(), "cannot open checkpoint: " + path);
        char magic[4] = {};
        in.read(magic, 4);
        check_runtime(in.gcount() == 4 && std::memcmp(magic, "SAEW", 4) == 0,
                      "bad checkpoint magic in " + path);
        const uint32_t version = read_u32(in, path);
        if (version != kCheckpointVersion) {
            throw std::runtime_error("unsupported checkpoint version " + std::to_string(version) +
                                     " (supported: " + std::to_string(kCheckpointVersion) +
                                     ") in " + path);
        }
        TensorFile f;
        while (true) {
            const int c = in.peek();
            if (c == std::char_traits<char>::eof()) break;
            const uint32_t name_len = read_u32(in, path);
            std::string name(name_len, '\0');
            in.read(name.data(), name_len);
            const uint32_t dtype = read_u32(in, path);
            check_runtime(dtype == kDtypeFloat64, "unsupported dtype code in " + path);
            const uint32_t rank = read_u32(in, path);
            Tensor t;
            t.dims.resize(rank);
            for (uint32_t i = 0; i < rank; ++i) t.dims[i] = read_u64(in, path);
            t.data.resize(t.element_count());
            in.read(reinterpret_cast<char*>(t.data.data()),
                    static_cast<std::streamsize>(t.data.size() * sizeof(double)));
            check_runtime(in.good(), "truncated checkpoint: " + path);
            f.add(name, std::move(t));
        }
        return f;
    }

private:
    static void write_u32(std::ofstream& out, uint32_t v) {
        out.write(reinterpret_cast<const char*>(&v), sizeof(v));
    }
    static void write_u64(std::ofstream& out, uint64_t v) {
        out.write(reinterpret_cast<const char*>(&v), sizeof(v));
    }
    static uint32_t read_u32(std::ifstream& in, const std::string& path) {
        uint32_t v = 0;
        in.read(reinterpret_cast<char*>(&v), sizeof(v));
        check_runtime(in.gcount() == sizeof(v), "truncated checkpoint: " + path);
        return v;
    }
    static uint64_t read_u64(std::ifstream& in, const std::string& path) {
        uint64_t v = 0;
        in.read(reinterpret_cast<char*>(&v), sizeof(v));
        check_runtime(in.gcount() == sizeof(v), "truncated checkpoint: " + path);
        return v;
    }

    std::vector<std::pair<std::string, Tensor>> entries_;
    std::map<std::string, size_t> index_;
};

}  // namespace saew
