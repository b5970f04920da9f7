#pragma once

// Little-endian byte encoding shared by the checkpoint, volume and map formats.

#include <bit>
#include <cstdint>
#include <cstring>
#include <span>
#include <string>
#include <vector>

#include "cfd/common.hpp"

namespace cfd::io {

class ByteWriter {
public:
    void bytes(const void* p, std::size_t n) {
        const auto* b = static_cast<const std::uint8_t*>(p);
        buf_.insert(buf_.end(), b, b + n);
    }
    void u32(std::uint32_t v) {
        for (int i = 0; i < 4; ++i) buf_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
    }
    void u64(std::uint64_t v) {
        for (int i = 0; i < 8; ++i) buf_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
    }
    void f32(float v) { u32(std::bit_cast<std::uint32_t>(v)); }

    std::vector<std::uint8_t> take() { return std::move(buf_); }
    std::size_t size() const noexcept { return buf_.size(); }

private:
    std::vector<std::uint8_t> buf_;
};

class ByteReader {
public:
    explicit ByteReader(std::span<const std::uint8_t> data) : data_(data) {}

    /// Throws FormatError unless n more bytes are available; returns n.
    std::size_t need(std::uint64_t n) const {
        if (n > data_.size() - pos_)
            throw FormatError("truncated payload: need " + std::to_string(n) + " bytes, have " +
                                  std::to_string(data_.size() - pos_),
                              pos_);
        return static_cast<std::size_t>(n);
    }
    void bytes(void* out, std::size_t n) {
        need(n);
        std::memcpy(out, data_.data() + pos_, n);
        pos_ += n;
    }
    std::uint32_t u32() {
        need(4);
        std::uint32_t v = 0;
        for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(data_[pos_ + i]) << (8 * i);
        pos_ += 4;
        return v;
    }
    std::uint64_t u64() {
        need(8);
        std::uint64_t v = 0;
        for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(data_[pos_ + i]) << (8 * i);
        pos_ += 8;
        return v;
    }
    float f32() { return std::bit_cast<float>(u32()); }

    std::uint64_t offset() const noexcept { return pos_; }
    bool at_end() const noexcept { return pos_ == data_.size(); }

private:
    std::span<const std::uint8_t> data_;
    std::size_t pos_ = 0;
};

std::vector<std::uint8_t> read_file(const std::string& path);
void write_file(const std::string& path, std::span<const std::uint8_t> bytes);
std::string read_text(const std::string& path);
void write_text(const std::string& path, const std::string& text);

}  // namespace cfd::io
