#pragma once

#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <vector>

#include "heterotune/common.hpp"
#include "heterotune/federation.hpp"
#include "heterotune/matrix.hpp"

namespace heterotune {

// HTAD checkpoint: magic "HTAD", format version u32, manifest of u32 counts
// and shapes, then raw f64 arrays in declaration order. Everything
// little-endian regardless of host.

namespace detail {

constexpr uint32_t kCheckpointVersion = 1;
constexpr uint32_t kKindGroup = 1;
constexpr uint32_t kKindShare = 2;

class ByteWriter {
  public:
    void u32(uint32_t v) {
        for (int i = 0; i < 4; ++i) bytes_.push_back(static_cast<uint8_t>(v >> (8 * i)));
    }
    void u64(uint64_t v) {
        for (int i = 0; i < 8; ++i) bytes_.push_back(static_cast<uint8_t>(v >> (8 * i)));
    }
    void f64(double v) {
        uint64_t bits;
        std::memcpy(&bits, &v, sizeof(bits));
        u64(bits);
    }
    void magic() {
        bytes_.push_back('H');
        bytes_.push_back('T');
        bytes_.push_back('A');
        bytes_.push_back('D');
    }
    void matrix_data(const Matrix& m) {
        for (double v : m.data) f64(v);
    }
    const std::vector<uint8_t>& bytes() const { return bytes_; }

  private:
    std::vector<uint8_t> bytes_;
};

class ByteReader {
  public:
    ByteReader(const std::vector<uint8_t>& bytes, std::string name)
        : bytes_(bytes), name_(std::move(name)) {}

    uint32_t u32() {
        need(4);
        uint32_t v = 0;
        for (int i = 0; i < 4; ++i) v |= static_cast<uint32_t>(bytes_[pos_++]) << (8 * i);
        return v;
    }
    uint64_t u64() {
        need(8);
        uint64_t v = 0;
        for (int i = 0; i < 8; ++i) v |= static_cast<uint64_t>(bytes_[pos_++]) << (8 * i);
        return v;
    }
    double f64() {
        const uint64_t bits = u64();
        double v;
        std::memcpy(&v, &bits, sizeof(v));
        return v;
    }
    void magic() {
        need(4);
        if (bytes_[pos_] != 'H' || bytes_[pos_ + 1] != 'T' || bytes_[pos_ + 2] != 'A' ||
            bytes_[pos_ + 3] != 'D')
            throw DataError(name_ + ": bad checkpoint magic at byte 0");
        pos_ += 4;
    }
    Matrix matrix_data(int rows, int cols) {
        Matrix m(rows, cols);
        for (double& v : m.data) v = f64();
        return m;
    }
    void finish() {
        if (pos_ != bytes_.size())
            throw DataError(name_ + ": " + std::to_string(bytes_.size() - pos_) +
                            " trailing bytes after checkpoint payload");
    }

  private:
    void need(size_t n) {
        if (pos_ + n > bytes_.size())
            throw DataError(name_ + ": truncated checkpoint, needed " + std::to_string(pos_ + n) +
                            " bytes, have " + std::to_string(bytes_.size()));
    }
    const std::vector<uint8_t>& bytes_;
    std::string name_;
    size_t pos_ = 0;
};

inline void write_bytes(const std::string& path, const std::vector<uint8_t>& bytes) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw DataError("cannot write " + path);
    out.write(reinterpret_cast<const char*>(bytes.data()),
              static_cast<std::streamsize>(bytes.size()));
    if (!out) throw DataError("short write to " + path);
}

}  // namespace detail

/// Group checkpoint: config, backbone fingerprint, frozen backbone weights,
/// aggregated local-adapter stack, alphas, and head.
inline std::vector<uint8_t> encode_group(const GroupServerState& g) {
    detail::ByteWriter w;
    w.magic();
    w.u32(detail::kCheckpointVersion);
    w.u32(detail::kKindGroup);
    w.u32(static_cast<uint32_t>(g.config.group_id));
    w.u32(static_cast<uint32_t>(g.config.depth));
    w.u32(static_cast<uint32_t>(g.config.width));
    w.u32(static_cast<uint32_t>(g.config.bottleneck));
    w.u32(static_cast<uint32_t>(g.config.input_dim));
    w.u32(static_cast<uint32_t>(g.config.num_classes));
    const uint32_t num_branches =
        g.local.blocks.empty() ? 0 : static_cast<uint32_t>(g.local.blocks[0].alphas.size());
    w.u32(num_branches);
    w.u64(g.backbone->fingerprint);
    w.matrix_data(g.backbone->input_proj);
    for (const auto& blk : g.backbone->blocks) {
        w.matrix_data(blk.w1);
        w.matrix_data(blk.w2);
    }
    for (const auto& blk : g.local.blocks) {
        w.matrix_data(blk.w_loc_d);
        w.matrix_data(blk.w_loc_u);
        for (double a : blk.alphas) w.f64(a);
    }
    w.matrix_data(g.local.head);
    return w.bytes();
}

inline GroupServerState decode_group(const std::vector<uint8_t>& bytes, const std::string& name) {
    detail::ByteReader r(bytes, name);
    r.magic();
    const uint32_t version = r.u32();
    if (version != detail::kCheckpointVersion)
        throw DataError(name + ": checkpoint version " + std::to_string(version) + ", want " +
                        std::to_string(detail::kCheckpointVersion));
    if (r.u32() != detail::kKindGroup) throw DataError(name + ": not a group checkpoint");
    GroupServerState g;
    g.config.group_id = static_cast<int>(r.u32());
    g.config.depth = static_cast<int>(r.u32());
    g.config.width = static_cast<int>(r.u32());
    g.config.bottleneck = static_cast<int>(r.u32());
    g.config.input_dim = static_cast<int>(r.u32());
    g.config.num_classes = static_cast<int>(r.u32());
    const int num_branches = static_cast<int>(r.u32());
    const uint64_t fingerprint = r.u64();
    auto backbone = std::make_shared<Backbone>();
    backbone->input_proj = r.matrix_data(g.config.input_dim, g.config.width);
    backbone->blocks.resize(g.config.depth);
    for (auto& blk : backbone->blocks) {
        blk.w1 = r.matrix_data(g.config.width, g.config.width);
        blk.w2 = r.matrix_data(g.config.width, g.config.width);
    }
    backbone->fingerprint = fingerprint;
    if (backbone_fingerprint(*backbone) != fingerprint)
        throw DataError(name + ": frozen-weight fingerprint mismatch");
    g.backbone = std::move(backbone);
    g.local.blocks.resize(g.config.depth);
    for (auto& blk : g.local.blocks) {
        blk.w_loc_d = r.matrix_data(g.config.width, g.config.bottleneck);
        blk.w_loc_u = r.matrix_data(g.config.bottleneck, g.config.width);
        blk.alphas.resize(num_branches);
        for (double& a : blk.alphas) a = r.f64();
    }
    g.local.head = r.matrix_data(g.config.width, g.config.num_classes);
    r.finish();
    return g;
}

/// Share checkpoint: every share set, slot by slot, branch by branch.
inline std::vector<uint8_t> encode_share(const ServerState& s) {
    detail::ByteWriter w;
    w.magic();
    w.u32(detail::kCheckpointVersion);
    w.u32(detail::kKindShare);
    w.u32(static_cast<uint32_t>(s.share_sets.size()));
    w.u32(static_cast<uint32_t>(s.max_depth));
    const uint32_t num_branches =
        s.max_depth > 0 ? static_cast<uint32_t>(s.share_sets[0][0].size()) : 0;
    w.u32(num_branches);
    const uint32_t r =
        num_branches > 0 ? static_cast<uint32_t>(s.share_sets[0][0][0].w_s_d.rows) : 0;
    w.u32(r);
    w.u32(static_cast<uint32_t>(s.round));
    for (const auto& set : s.share_sets)
        for (const auto& slot : set)
            for (const auto& pair : slot) {
                w.matrix_data(pair.w_s_d);
                w.matrix_data(pair.w_s_u);
            }
    return w.bytes();
}

/// Whole-state encoding used by the bitwise comparisons (round counter
/// excluded so states from different rounds can be compared).
inline std::vector<uint8_t> encode_server_state(const ServerState& s) {
    std::vector<uint8_t> out;
    for (const auto& g : s.groups) {
        const auto part = encode_group(g);
        out.insert(out.end(), part.begin(), part.end());
    }
    ServerState shell;
    shell.max_depth = s.max_depth;
    shell.share_sets = s.share_sets;
    shell.round = 0;
    const auto part = encode_share(shell);
    out.insert(out.end(), part.begin(), part.end());
    return out;
}

inline void write_checkpoints(const ServerState& s, const std::string& dir) {
    for (size_t g = 0; g < s.groups.size(); ++g)
        detail::write_bytes(dir + "/group" + std::to_string(g) + ".htad", encode_group(s.groups[g]));
    detail::write_bytes(dir + "/share.htad", encode_share(s));
}

}  // namespace heterotune
