#include "revprag/binio.hpp"
#include "revprag/error.hpp"
#include "revprag/rng.hpp"
#include "revprag/textio.hpp"

#include <cmath>
#include <fstream>
#include <iostream>
#include <iterator>
#include <mutex>
#include <numbers>

namespace revprag {

namespace {

std::mutex sink_mutex;

WarningSink& sink()
{
    static WarningSink s = [](std::string_view m) { std::cerr << "warning: " << m << '\n'; };
    return s;
}

} // namespace

void warn(std::string_view message)
{
    std::lock_guard lock(sink_mutex);
    if (sink())
        sink()(message);
}

WarningSink set_warning_sink(WarningSink s)
{
    std::lock_guard lock(sink_mutex);
    return std::exchange(sink(), std::move(s));
}

std::string read_text(const std::filesystem::path& path)
{
    std::ifstream in(path, std::ios::binary);
    if (!in)
        throw Error("cannot open " + path.string());
    return std::string((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
}

void write_text(const std::filesystem::path& path, std::string_view content)
{
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out)
        throw Error("cannot open " + path.string() + " for writing");
    out.write(content.data(), static_cast<std::streamsize>(content.size()));
    if (!out)
        throw Error("write failed: " + path.string());
}

double Rng::normal()
{
    double u1 = uniform();
    while (u1 <= 0.0)
        u1 = uniform();
    const double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
}

namespace binio {

void Writer::save(const std::filesystem::path& path) const
{
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out)
        throw Error("cannot open " + path.string() + " for writing");
    out.write(reinterpret_cast<const char*>(buf_.data()), static_cast<std::streamsize>(buf_.size()));
    if (!out)
        throw Error("write failed: " + path.string());
}

Reader Reader::load(const std::filesystem::path& path)
{
    std::ifstream in(path, std::ios::binary);
    if (!in)
        throw Error("cannot open " + path.string());
    std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    return Reader(std::move(bytes), path.string());
}

void Reader::need(std::size_t n)
{
    if (buf_.size() - pos_ < n)
        throw Error(what_ + ": truncated at byte " + std::to_string(pos_));
}

std::uint8_t Reader::u8()
{
    need(1);
    return buf_[pos_++];
}

std::uint32_t Reader::u32()
{
    need(4);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i)
        v |= static_cast<std::uint32_t>(buf_[pos_++]) << (8 * i);
    return v;
}

std::uint64_t Reader::u64()
{
    need(8);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i)
        v |= static_cast<std::uint64_t>(buf_[pos_++]) << (8 * i);
    return v;
}

float Reader::f32()
{
    const std::uint32_t bits = u32();
    float v;
    std::memcpy(&v, &bits, 4);
    return v;
}

double Reader::f64()
{
    const std::uint64_t bits = u64();
    double v;
    std::memcpy(&v, &bits, 8);
    return v;
}

std::string Reader::str()
{
    const std::uint32_t n = u32();
    need(n);
    std::string s(reinterpret_cast<const char*>(buf_.data() + pos_), n);
    pos_ += n;
    return s;
}

void Reader::expect_magic(std::string_view m)
{
    need(m.size());
    if (std::string_view(reinterpret_cast<const char*>(buf_.data() + pos_), m.size()) != m)
        throw Error(what_ + ": bad magic, expected " + std::string(m));
    pos_ += m.size();
}

void Reader::f32s(std::span<float> out)
{
    need(out.size() * 4);
    for (float& v : out)
        v = f32();
}

} // namespace binio
} // namespace revprag
