#pragma once

// Little-endian binary helpers shared by the checkpoint and dataset formats.

#include <cstdint>
#include <cstring>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace revprag::binio {

class Writer {
public:
    void u8(std::uint8_t v) { buf_.push_back(v); }
    void u32(std::uint32_t v)
    {
        for (int i = 0; i < 4; ++i)
            buf_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
    }
    void u64(std::uint64_t v)
    {
        for (int i = 0; i < 8; ++i)
            buf_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
    }
    void f32(float v)
    {
        std::uint32_t bits;
        std::memcpy(&bits, &v, 4);
        u32(bits);
    }
    void f64(double v)
    {
        std::uint64_t bits;
        std::memcpy(&bits, &v, 8);
        u64(bits);
    }
    void magic(std::string_view m) { buf_.insert(buf_.end(), m.begin(), m.end()); }
    void str(std::string_view s)
    {
        u32(static_cast<std::uint32_t>(s.size()));
        buf_.insert(buf_.end(), s.begin(), s.end());
    }
    void f32s(std::span<const float> values)
    {
        for (float v : values)
            f32(v);
    }

    const std::vector<std::uint8_t>& bytes() const { return buf_; }
    void save(const std::filesystem::path& path) const;

private:
    std::vector<std::uint8_t> buf_;
};

class Reader {
public:
    explicit Reader(std::vector<std::uint8_t> bytes, std::string what = "file")
        : buf_(std::move(bytes)), what_(std::move(what))
    {
    }
    static Reader load(const std::filesystem::path& path);

    std::uint8_t u8();
    std::uint32_t u32();
    std::uint64_t u64();
    float f32();
    double f64();
    std::string str();
    void expect_magic(std::string_view m);
    void f32s(std::span<float> out);
    bool done() const { return pos_ == buf_.size(); }

private:
    void need(std::size_t n);

    std::vector<std::uint8_t> buf_;
    std::size_t pos_ = 0;
    std::string what_;
};

} // namespace revprag::binio
