// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <string>
#include <vector>

#include "rsparse/geometry.hpp"

namespace rsparse {

struct GroundTruthScene {
  std::string scene_id;
  int image_width = 0;
  int image_height = 0;
  std::vector<OrientedBox> boxes;
  std::string split;  // "inshore", "offshore" or empty
};

struct Detection {
  OrientedBox box;
  double score = 0.0;
  bool keep = true;  // display flag from an optional score threshold
};

using Detections = std::vector<Detection>;

}  // namespace rsparse
