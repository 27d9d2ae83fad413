#pragma once

#include <functional>
#include <stdexcept>
#include <string>
#include <string_view>

namespace revprag {

class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// Non-fatal diagnostics (duplicate questions, zero-norm cosine, ...).
// The default sink writes to stderr; tests install their own to capture.
using WarningSink = std::function<void(std::string_view)>;

void warn(std::string_view message);
WarningSink set_warning_sink(WarningSink sink);

} // namespace revprag
