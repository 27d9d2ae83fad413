#pragma once

#include "revprag/error.hpp"
#include "revprag/probedata.hpp"
#include "revprag/rng.hpp"

#include <unistd.h>

#include <filesystem>
#include <string>
#include <vector>

namespace testing {

// Fresh directory under the system temp dir, removed on destruction.
class TempDir {
public:
    explicit TempDir(const std::string& tag)
        : path_(std::filesystem::temp_directory_path() / ("revprag_" + tag + "_" + std::to_string(::getpid())))
    {
        std::filesystem::remove_all(path_);
        std::filesystem::create_directories(path_);
    }
    ~TempDir() { std::filesystem::remove_all(path_); }
    const std::filesystem::path& path() const { return path_; }
    std::filesystem::path operator/(const std::string& name) const { return path_ / name; }

private:
    std::filesystem::path path_;
};

// Collects warnings for the lifetime of the object.
class WarningCapture {
public:
    WarningCapture()
    {
        previous_ = revprag::set_warning_sink([this](std::string_view m) { messages.emplace_back(m); });
    }
    ~WarningCapture() { revprag::set_warning_sink(std::move(previous_)); }
    std::vector<std::string> messages;

private:
    revprag::WarningSink previous_;
};

// Two Gaussian clusters, one per label, centred at -shift and +shift.
// Instances are numbered in order; splits cycle train, train, test, support
// unless `all_train` is set.
inline revprag::ActivationDataset clusters(std::size_t n, std::uint32_t rows, std::uint32_t cols, double shift,
                                           std::uint64_t seed, bool all_train = false)
{
    revprag::Rng rng(seed);
    revprag::ActivationDataset d;
    d.rows = rows;
    d.cols = cols;
    const std::size_t m = std::size_t{rows} * cols;
    d.stats = {std::vector<float>(m, 0.0f), std::vector<float>(m, 1.0f), 1e-8};
    for (std::size_t i = 0; i < n; ++i) {
        revprag::Sample s;
        s.label = static_cast<std::uint8_t>(i % 2);
        s.instance = static_cast<std::uint32_t>(i);
        const std::size_t phase = (i / 2) % 4;
        s.split = all_train || phase < 2 ? revprag::SplitTag::train
                  : phase == 2          ? revprag::SplitTag::test
                                        : revprag::SplitTag::support;
        s.map.rows = rows;
        s.map.cols = cols;
        s.map.values.resize(m);
        const double c = s.label == revprag::label_poisoned ? -shift : shift;
        for (auto& v : s.map.values)
            v = static_cast<float>(c + rng.normal());
        d.samples.push_back(std::move(s));
    }
    return d;
}

} // namespace testing
