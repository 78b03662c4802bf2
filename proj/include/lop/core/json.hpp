#pragma once

#include <json.hpp>

namespace lop {

using Json = nlohmann::json;

}  // namespace lop
