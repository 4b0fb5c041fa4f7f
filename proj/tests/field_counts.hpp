#pragma once

#include <array>
#include <utility>

namespace testsupport {

// Directional field counts on four freeway segments: (estimated count, error
// rate in percent) for top-down Motpy, top-down BYTE, perspective Motpy and
// perspective BYTE.
struct CountRow {
    const char* segment;
    const char* cls;
    int direction;
    int real;
    std::array<std::pair<int, double>, 4> cells;
};

inline constexpr std::array<CountRow, 16> kFieldCounts{{
    {"I270 Dougherty", "Car", 1, 548, {{{525, 4.20}, {542, 1.09}, {611, 11.50}, {654, 19.34}}}},
    {"I270 Dougherty", "Car", 2, 440, {{{416, 5.45}, {442, 0.45}, {562, 27.73}, {631, 43.41}}}},
    {"I270 Dougherty", "Truck", 1, 32, {{{21, 34.38}, {29, 9.38}, {67, 109.38}, {58, 81.25}}}},
    {"I270 Dougherty", "Truck", 2, 7, {{{5, 28.57}, {8, 14.29}, {50, 614.29}, {18, 157.14}}}},
    {"I270 Clayton", "Car", 1, 332, {{{284, 14.46}, {335, 0.90}, {547, 64.76}, {414, 24.70}}}},
    {"I270 Clayton", "Car", 2, 472, {{{452, 4.24}, {462, 2.12}, {604, 27.97}, {580, 22.88}}}},
    {"I270 Clayton", "Truck", 1, 18, {{{14, 22.22}, {19, 5.56}, {40, 122.22}, {35, 94.44}}}},
    {"I270 Clayton", "Truck", 2, 29, {{{27, 6.90}, {31, 6.90}, {54, 86.21}, {47, 62.07}}}},
    {"I270 364", "Car", 1, 303, {{{290, 4.29}, {302, 0.33}, {372, 22.77}, {384, 26.73}}}},
    {"I270 364", "Car", 2, 320, {{{303, 5.31}, {312, 2.50}, {418, 30.63}, {403, 25.94}}}},
    {"I270 364", "Truck", 1, 10, {{{11, 10.00}, {11, 10.00}, {37, 270.00}, {25, 150.00}}}},
    {"I270 364", "Truck", 2, 16, {{{11, 31.25}, {18, 12.50}, {42, 162.50}, {34, 112.50}}}},
    {"I270 Gravois", "Car", 1, 439, {{{444, 1.14}, {450, 2.51}, {535, 21.87}, {614, 39.86}}}},
    {"I270 Gravois", "Car", 2, 330, {{{311, 5.76}, {345, 4.55}, {410, 24.24}, {415, 25.76}}}},
    {"I270 Gravois", "Truck", 1, 26, {{{17, 34.62}, {27, 3.85}, {34, 30.77}, {30, 15.38}}}},
    {"I270 Gravois", "Truck", 2, 23, {{{13, 43.48}, {23, 0.00}, {21, 8.70}, {23, 0.00}}}},
}};

}  // namespace testsupport
