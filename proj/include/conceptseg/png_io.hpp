/* Copyright 2026 The ConceptSeg Authors. All Rights Reserved.

Licensed under the Apache License, Version 2.0 (the "License");
you may not use this file except in compliance with the License.
You may obtain a copy of the License at

    http://www.apache.org/licenses/LICENSE-2.0

Unless required by applicable law or agreed to in writing, software
distributed under the License is distributed on an "AS IS" BASIS,
WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
See the License for the specific language governing permissions and
limitations under the License.
==============================================================================*/

#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

namespace cseg::png {

// Thin wrappers around libpng with fixed settings so outputs are
// deterministic. All functions throw IoError with the offending path.

void write_rgb8(const std::string& path, int h, int w,
                const std::vector<std::uint8_t>& rgb);
void read_rgb8(const std::string& path, int& h, int& w,
               std::vector<std::uint8_t>& rgb);

void write_gray16(const std::string& path, int h, int w,
                  const std::vector<std::uint16_t>& gray);
void read_gray16(const std::string& path, int& h, int& w,
                 std::vector<std::uint16_t>& gray);

// 8-bit indexed PNG with an explicit palette (up to 256 entries of rgb).
void write_indexed8(const std::string& path, int h, int w,
                    const std::vector<std::uint8_t>& indices,
                    const std::vector<std::array<std::uint8_t, 3>>& palette);

}  // namespace cseg::png
