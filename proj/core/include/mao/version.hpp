#pragma once

#include <string_view>

namespace mao {

// Project version plus `git describe` captured at configure time.
std::string_view version_string();

}  // namespace mao
