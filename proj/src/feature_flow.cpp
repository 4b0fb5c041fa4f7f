#include "bevtrack/feature_flow.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <iterator>

#include <Eigen/Dense>

#include "bevtrack/error.hpp"

namespace bevtrack {

GrayFrame::GrayFrame(int w, int h, std::uint8_t fill)
    : width(w), height(h), data(static_cast<std::size_t>(w) * static_cast<std::size_t>(h), fill) {}

// ---------------------------------------------------------------------------
// PGM

namespace {

class PgmReader {
public:
    explicit PgmReader(std::span<const std::uint8_t> b) : bytes_(b) {}

    void skip_space_and_comments() {
        while (pos_ < bytes_.size()) {
            const auto c = static_cast<char>(bytes_[pos_]);
            if (c == '#') {
                while (pos_ < bytes_.size() && bytes_[pos_] != '\n') ++pos_;
            } else if (std::isspace(static_cast<unsigned char>(c))) {
                ++pos_;
            } else {
                break;
            }
        }
    }

    long read_int() {
        skip_space_and_comments();
        long v = 0;
        std::size_t digits = 0;
        while (pos_ < bytes_.size() && std::isdigit(bytes_[pos_])) {
            v = v * 10 + (bytes_[pos_] - '0');
            if (v > 1'000'000) throw Error(Errc::Malformed, "PGM header value too large");
            ++pos_;
            ++digits;
        }
        if (digits == 0) throw Error(Errc::Malformed, "expected an integer in the PGM header");
        return v;
    }

    std::span<const std::uint8_t> bytes_;
    std::size_t pos_ = 0;
};

}  // namespace

GrayFrame decode_pgm(std::span<const std::uint8_t> bytes) {
    if (bytes.size() < 2 || bytes[0] != 'P' || bytes[1] != '5') {
        throw Error(Errc::Malformed, "not a binary P5 PGM");
    }
    PgmReader r(bytes);
    r.pos_ = 2;
    const long w = r.read_int();
    const long h = r.read_int();
    const long maxval = r.read_int();
    if (w <= 0 || h <= 0) throw Error(Errc::Malformed, "PGM dimensions must be positive");
    if (maxval != 255) throw Error(Errc::Malformed, "only 8-bit PGM (maxval 255) is supported");
    if (r.pos_ >= bytes.size() || !std::isspace(bytes[r.pos_])) {
        throw Error(Errc::Malformed, "missing separator before PGM payload");
    }
    ++r.pos_;
    const auto n = static_cast<std::size_t>(w) * static_cast<std::size_t>(h);
    if (bytes.size() - r.pos_ < n) throw Error(Errc::Malformed, "truncated PGM payload");
    GrayFrame f(static_cast<int>(w), static_cast<int>(h));
    std::copy_n(bytes.begin() + static_cast<std::ptrdiff_t>(r.pos_), n, f.data.begin());
    return f;
}

std::vector<std::uint8_t> encode_pgm(const GrayFrame& f) {
    const std::string header = "P5\n" + std::to_string(f.width) + " " + std::to_string(f.height) + "\n255\n";
    std::vector<std::uint8_t> out(header.begin(), header.end());
    out.insert(out.end(), f.data.begin(), f.data.end());
    return out;
}

GrayFrame read_pgm(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw Error(Errc::IoError, "cannot open " + path.string());
    const std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    return decode_pgm(bytes);
}

void write_pgm(const std::filesystem::path& path, const GrayFrame& f) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw Error(Errc::IoError, "cannot write " + path.string());
    const auto bytes = encode_pgm(f);
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw Error(Errc::IoError, "write failed for " + path.string());
}

std::string frame_filename(int frame) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "frame_%06d.pgm", frame);
    return buf;
}

// ---------------------------------------------------------------------------
// Float image helpers

namespace {

struct Image {
    int w = 0;
    int h = 0;
    std::vector<double> v;

    Image() = default;
    Image(int w_, int h_) : w(w_), h(h_), v(static_cast<std::size_t>(w_) * h_, 0.0) {}

    double at(int x, int y) const { return v[static_cast<std::size_t>(y) * w + x]; }
    double& at(int x, int y) { return v[static_cast<std::size_t>(y) * w + x]; }
    double clamped(int x, int y) const { return at(std::clamp(x, 0, w - 1), std::clamp(y, 0, h - 1)); }

    double bilinear(double x, double y) const {
        const double fx = std::floor(x);
        const double fy = std::floor(y);
        const int x0 = static_cast<int>(fx);
        const int y0 = static_cast<int>(fy);
        const double ax = x - fx;
        const double ay = y - fy;
        return (1 - ay) * ((1 - ax) * clamped(x0, y0) + ax * clamped(x0 + 1, y0)) +
               ay * ((1 - ax) * clamped(x0, y0 + 1) + ax * clamped(x0 + 1, y0 + 1));
    }
};

Image to_image(const GrayFrame& f, double scale) {
    Image img(f.width, f.height);
    for (std::size_t i = 0; i < f.data.size(); ++i) img.v[i] = scale * f.data[i];
    return img;
}

int reflect(int i, int n) {
    if (n == 1) return 0;
    while (i < 0 || i >= n) i = i < 0 ? -i : 2 * (n - 1) - i;
    return i;
}

// 5-tap binomial blur followed by 2x decimation.
Image pyr_down(const Image& src) {
    static constexpr double k[5] = {1.0 / 16, 4.0 / 16, 6.0 / 16, 4.0 / 16, 1.0 / 16};
    Image tmp(src.w, src.h);
    for (int y = 0; y < src.h; ++y) {
        for (int x = 0; x < src.w; ++x) {
            double s = 0.0;
            for (int t = -2; t <= 2; ++t) s += k[t + 2] * src.at(reflect(x + t, src.w), y);
            tmp.at(x, y) = s;
        }
    }
    Image out((src.w + 1) / 2, (src.h + 1) / 2);
    for (int y = 0; y < out.h; ++y) {
        for (int x = 0; x < out.w; ++x) {
            double s = 0.0;
            for (int t = -2; t <= 2; ++t) s += k[t + 2] * tmp.at(2 * x, reflect(2 * y + t, src.h));
            out.at(x, y) = s;
        }
    }
    return out;
}

struct Level {
    Image img;
    Image gx;
    Image gy;
};

std::vector<Level> build_pyramid(const GrayFrame& f, int levels) {
    std::vector<Level> pyr;
    Image cur = to_image(f, 1.0 / 255.0);
    for (int l = 0; l < levels; ++l) {
        if (l > 0) cur = pyr_down(cur);
        Level lvl{cur, Image(cur.w, cur.h), Image(cur.w, cur.h)};
        for (int y = 0; y < cur.h; ++y) {
            for (int x = 0; x < cur.w; ++x) {
                lvl.gx.at(x, y) = 0.5 * (cur.clamped(x + 1, y) - cur.clamped(x - 1, y));
                lvl.gy.at(x, y) = 0.5 * (cur.clamped(x, y + 1) - cur.clamped(x, y - 1));
            }
        }
        pyr.push_back(std::move(lvl));
        if (cur.w < 8 || cur.h < 8) break;
    }
    return pyr;
}

}  // namespace

// ---------------------------------------------------------------------------
// Harris

std::vector<FeaturePoint> harris_corners(const GrayFrame& f, const BBox& roi, int max_points,
                                         const HarrisParams& params) {
    std::vector<FeaturePoint> out;
    if (f.width < 7 || f.height < 7 || max_points <= 0) return out;
    const Image img = to_image(f, 1.0);
    const int w = f.width;
    const int h = f.height;

    Image ixx(w, h), iyy(w, h), ixy(w, h);
    for (int y = 1; y < h - 1; ++y) {
        for (int x = 1; x < w - 1; ++x) {
            const double gx = (img.at(x + 1, y - 1) + 2 * img.at(x + 1, y) + img.at(x + 1, y + 1)) -
                              (img.at(x - 1, y - 1) + 2 * img.at(x - 1, y) + img.at(x - 1, y + 1));
            const double gy = (img.at(x - 1, y + 1) + 2 * img.at(x, y + 1) + img.at(x + 1, y + 1)) -
                              (img.at(x - 1, y - 1) + 2 * img.at(x, y - 1) + img.at(x + 1, y - 1));
            ixx.at(x, y) = gx * gx;
            iyy.at(x, y) = gy * gy;
            ixy.at(x, y) = gx * gy;
        }
    }
    Image resp(w, h);
    for (int y = 2; y < h - 2; ++y) {
        for (int x = 2; x < w - 2; ++x) {
            double a = 0, b = 0, c = 0;
            for (int dy = -1; dy <= 1; ++dy) {
                for (int dx = -1; dx <= 1; ++dx) {
                    a += ixx.at(x + dx, y + dy);
                    b += iyy.at(x + dx, y + dy);
                    c += ixy.at(x + dx, y + dy);
                }
            }
            const double tr = a + b;
            resp.at(x, y) = (a * b - c * c) - params.k * tr * tr;
        }
    }

    const int x0 = std::max(3, static_cast<int>(std::floor(roi.x)));
    const int y0 = std::max(3, static_cast<int>(std::floor(roi.y)));
    const int x1 = std::min(w - 4, static_cast<int>(std::ceil(roi.x + roi.w)));
    const int y1 = std::min(h - 4, static_cast<int>(std::ceil(roi.y + roi.h)));
    if (x0 > x1 || y0 > y1) return out;

    double max_r = 0.0;
    for (int y = y0; y <= y1; ++y) {
        for (int x = x0; x <= x1; ++x) max_r = std::max(max_r, resp.at(x, y));
    }
    if (max_r <= 0.0) return out;
    const double thresh = params.quality_level * max_r;

    for (int y = y0; y <= y1; ++y) {
        for (int x = x0; x <= x1; ++x) {
            const double r = resp.at(x, y);
            if (r <= thresh) continue;
            bool is_max = true;
            for (int dy = -1; dy <= 1 && is_max; ++dy) {
                for (int dx = -1; dx <= 1; ++dx) {
                    if (dx == 0 && dy == 0) continue;
                    const double n = resp.at(x + dx, y + dy);
                    // Plateaus: the first pixel in raster order wins.
                    const bool earlier = dy < 0 || (dy == 0 && dx < 0);
                    if (earlier ? n >= r : n > r) {
                        is_max = false;
                        break;
                    }
                }
            }
            if (!is_max) continue;
            auto parabolic = [](double l, double c, double rr) {
                const double den = l - 2 * c + rr;
                return den < 0.0 ? std::clamp(0.5 * (l - rr) / den, -0.5, 0.5) : 0.0;
            };
            const double sx = parabolic(resp.at(x - 1, y), r, resp.at(x + 1, y));
            const double sy = parabolic(resp.at(x, y - 1), r, resp.at(x, y + 1));
            out.push_back({{x + sx, y + sy}, r});
        }
    }
    std::stable_sort(out.begin(), out.end(),
                     [](const FeaturePoint& a, const FeaturePoint& b) { return a.response > b.response; });
    if (static_cast<int>(out.size()) > max_points) out.resize(static_cast<std::size_t>(max_points));
    return out;
}

// ---------------------------------------------------------------------------
// Pyramidal Lucas-Kanade

namespace {

std::vector<TrackedPoint> lk_track_pyramids(const std::vector<Level>& pyr_prev, const std::vector<Level>& pyr_next,
                                            std::span<const FeaturePoint> pts, const LkParams& params) {
    std::vector<TrackedPoint> out(pts.size());
    const int width = pyr_prev.front().img.w;
    const int height = pyr_prev.front().img.h;
    const int levels = static_cast<int>(std::min(pyr_prev.size(), pyr_next.size()));
    const int r = params.window / 2;
    const double area = static_cast<double>(params.window) * params.window;

    for (std::size_t k = 0; k < pts.size(); ++k) {
        const Point2 p0 = pts[k].pos;
        Point2 guess{0.0, 0.0};
        bool valid = true;
        for (int l = levels - 1; l >= 0; --l) {
            const Level& a = pyr_prev[static_cast<std::size_t>(l)];
            const Level& b = pyr_next[static_cast<std::size_t>(l)];
            const double s = 1.0 / static_cast<double>(1 << l);
            const Point2 p{p0.x * s, p0.y * s};

            Eigen::Matrix2d g = Eigen::Matrix2d::Zero();
            std::vector<double> ia, gxs, gys;
            ia.reserve(static_cast<std::size_t>(area));
            gxs.reserve(static_cast<std::size_t>(area));
            gys.reserve(static_cast<std::size_t>(area));
            for (int dy = -r; dy <= r; ++dy) {
                for (int dx = -r; dx <= r; ++dx) {
                    const double x = p.x + dx;
                    const double y = p.y + dy;
                    const double gx = a.gx.bilinear(x, y);
                    const double gy = a.gy.bilinear(x, y);
                    g(0, 0) += gx * gx;
                    g(0, 1) += gx * gy;
                    g(1, 1) += gy * gy;
                    ia.push_back(a.img.bilinear(x, y));
                    gxs.push_back(gx);
                    gys.push_back(gy);
                }
            }
            g(1, 0) = g(0, 1);
            const double tr = g(0, 0) + g(1, 1);
            const double det = g(0, 0) * g(1, 1) - g(0, 1) * g(0, 1);
            const double min_eig = 0.5 * (tr - std::sqrt(std::max(0.0, tr * tr - 4.0 * det)));
            if (min_eig < params.min_eigen_fraction * area) {
                if (l == 0) valid = false;
                if (l > 0) {
                    guess = 2.0 * guess;
                    continue;
                }
                break;
            }
            const Eigen::Matrix2d g_inv = g.inverse();

            Point2 d{0.0, 0.0};
            for (int it = 0; it < params.max_iterations; ++it) {
                Eigen::Vector2d mis = Eigen::Vector2d::Zero();
                std::size_t idx = 0;
                for (int dy = -r; dy <= r; ++dy) {
                    for (int dx = -r; dx <= r; ++dx, ++idx) {
                        const double diff =
                            ia[idx] - b.img.bilinear(p.x + dx + guess.x + d.x, p.y + dy + guess.y + d.y);
                        mis(0) += diff * gxs[idx];
                        mis(1) += diff * gys[idx];
                    }
                }
                const Eigen::Vector2d step = g_inv * mis;
                d = d + Point2{step(0), step(1)};
                if (step.norm() < params.epsilon) break;
            }
            guess = l > 0 ? 2.0 * (guess + d) : guess + d;
        }
        const Point2 q = p0 + guess;
        if (!std::isfinite(q.x) || !std::isfinite(q.y) || q.x < 0.0 || q.y < 0.0 || q.x > width - 1.0 ||
            q.y > height - 1.0) {
            valid = false;
        }
        out[k] = {q, valid};
    }
    return out;
}

}  // namespace

std::vector<TrackedPoint> lk_track(const GrayFrame& prev, const GrayFrame& next, std::span<const FeaturePoint> pts,
                                   const LkParams& params) {
    if (prev.width != next.width || prev.height != next.height) {
        throw Error(Errc::DimensionMismatch, "frames differ in size");
    }
    if (pts.empty()) return {};
    return lk_track_pyramids(build_pyramid(prev, params.levels), build_pyramid(next, params.levels), pts, params);
}

namespace {

double median(std::vector<double> v) {
    const std::size_t mid = v.size() / 2;
    std::nth_element(v.begin(), v.begin() + static_cast<std::ptrdiff_t>(mid), v.end());
    const double hi = v[mid];
    if (v.size() % 2 == 1) return hi;
    const double lo = *std::max_element(v.begin(), v.begin() + static_cast<std::ptrdiff_t>(mid));
    return 0.5 * (lo + hi);
}

}  // namespace

FlowDisplacement predict_displacement(std::span<const GrayFrame> frames, std::span<const FeaturePoint> seeds,
                                      const Homography& image_to_bev, ImagePoint anchor, const LkParams& params) {
    if (frames.size() < 2) throw Error(Errc::TooShort, "need at least two frames");
    if (seeds.empty()) throw Error(Errc::NoValidPoints, "no seed points");

    std::vector<FeaturePoint> current(seeds.begin(), seeds.end());
    std::vector<Point2> origin;
    for (const auto& s : seeds) origin.push_back(s.pos);

    for (const auto& f : frames) {
        if (f.width != frames.front().width || f.height != frames.front().height) {
            throw Error(Errc::DimensionMismatch, "frames differ in size");
        }
    }
    // Each pyramid is built once and shared by the two steps that use it.
    auto pyr_prev = build_pyramid(frames[0], params.levels);
    for (std::size_t i = 1; i < frames.size() && !current.empty(); ++i) {
        auto pyr_next = build_pyramid(frames[i], params.levels);
        const auto tracked = lk_track_pyramids(pyr_prev, pyr_next, current, params);
        pyr_prev = std::move(pyr_next);
        std::vector<FeaturePoint> survivors;
        std::vector<Point2> kept_origin;
        for (std::size_t k = 0; k < tracked.size(); ++k) {
            if (!tracked[k].valid) continue;
            survivors.push_back({tracked[k].pos, current[k].response});
            kept_origin.push_back(origin[k]);
        }
        current = std::move(survivors);
        origin = std::move(kept_origin);
    }
    if (current.empty()) throw Error(Errc::NoValidPoints, "every feature point was lost");

    std::vector<double> dx, dy;
    for (std::size_t k = 0; k < current.size(); ++k) {
        dx.push_back(current[k].pos.x - origin[k].x);
        dy.push_back(current[k].pos.y - origin[k].y);
    }
    FlowDisplacement out;
    out.image = {median(std::move(dx)), median(std::move(dy))};
    out.bev = image_to_bev.apply(anchor + out.image) - image_to_bev.apply(anchor);
    return out;
}

}  // namespace bevtrack
