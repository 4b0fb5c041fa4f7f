#include "bevtrack/stitching.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <numbers>
#include <set>

namespace bevtrack {

namespace {

double point_segment_distance(Point2 p, Point2 a, Point2 b) {
    const Point2 ab = b - a;
    const double len2 = ab.x * ab.x + ab.y * ab.y;
    if (len2 == 0.0) return norm(p - a);
    const double t = std::clamp(((p.x - a.x) * ab.x + (p.y - a.y) * ab.y) / len2, 0.0, 1.0);
    return norm(p - (a + t * ab));
}

void dp_recurse(std::span<const BevPoint> pts, std::size_t lo, std::size_t hi, double eps,
                std::vector<char>& keep) {
    if (hi <= lo + 1) return;
    double best = -1.0;
    std::size_t idx = lo;
    for (std::size_t i = lo + 1; i < hi; ++i) {
        const double d = point_segment_distance(pts[i], pts[lo], pts[hi]);
        if (d > best) {
            best = d;
            idx = i;
        }
    }
    if (best > eps) {
        keep[idx] = 1;
        dp_recurse(pts, lo, idx, eps, keep);
        dp_recurse(pts, idx, hi, eps, keep);
    }
}

int direction_label(Point2 delta) {
    const double dom = std::abs(delta.x) >= std::abs(delta.y) ? delta.x : delta.y;
    if (dom > 0.0) return 1;
    if (dom < 0.0) return 2;
    return 0;
}

bool contains(const BBox& b, Point2 p) { return p.x >= b.x && p.x <= b.x + b.w && p.y >= b.y && p.y <= b.y + b.h; }

// Union of the anchor box and the same box carried forward by the terminal velocity.
BBox swept_box(const BBox& b, Point2 shift) {
    const double x0 = std::min(b.x, b.x + shift.x);
    const double y0 = std::min(b.y, b.y + shift.y);
    const double x1 = std::max(b.x + b.w, b.x + b.w + shift.x);
    const double y1 = std::max(b.y + b.h, b.y + b.h + shift.y);
    return {x0, y0, x1 - x0, y1 - y0};
}

double heading_angle_between(Point2 u, Point2 v) {
    const double nu = norm(u);
    const double nv = norm(v);
    if (nu == 0.0 || nv == 0.0) return 0.0;
    const double c = std::clamp((u.x * v.x + u.y * v.y) / (nu * nv), -1.0, 1.0);
    return std::acos(c) * 180.0 / std::numbers::pi;
}

Track merge_chain(std::vector<Track*> chain) {
    Track out = *chain.front();
    for (std::size_t i = 1; i < chain.size(); ++i) {
        const Track& t = *chain[i];
        out.entries.insert(out.entries.end(), t.entries.begin(), t.entries.end());
        out.max_score = std::max(out.max_score, t.max_score);
        out.filter = t.filter;
        out.misses = t.misses;
    }
    out.refresh_class();
    return out;
}

}  // namespace

std::vector<BevPoint> douglas_peucker(std::span<const BevPoint> pts, double epsilon) {
    if (pts.size() <= 2) return {pts.begin(), pts.end()};
    std::vector<char> keep(pts.size(), 0);
    keep.front() = 1;
    keep.back() = 1;
    dp_recurse(pts, 0, pts.size() - 1, epsilon, keep);
    std::vector<BevPoint> out;
    for (std::size_t i = 0; i < pts.size(); ++i) {
        if (keep[i]) out.push_back(pts[i]);
    }
    return out;
}

std::vector<Fragment> build_fragments(std::span<const Track> tracks, double dp_epsilon) {
    std::vector<Fragment> out;
    for (const Track& t : tracks) {
        if (t.size() < 2) continue;
        std::vector<BevPoint> centers;
        centers.reserve(t.size());
        for (const auto& e : t.entries) centers.push_back(e.det.center);
        const std::vector<BevPoint> poly = douglas_peucker(centers, dp_epsilon);
        const int dir = direction_label(centers.back() - centers.front());

        Fragment b;
        b.kind = FragmentKind::Begin;
        b.track_id = t.id;
        b.frame = t.first_frame();
        b.anchor = t.entries.front().det;
        b.polyline = poly;
        b.velocity = t.entries.front().state.velocity();
        b.direction = dir;

        Fragment e = b;
        e.kind = FragmentKind::End;
        e.frame = t.last_frame();
        e.anchor = t.entries.back().det;
        e.velocity = t.entries.back().state.velocity();

        out.push_back(std::move(b));
        out.push_back(std::move(e));
    }
    return out;
}

double deflection_deg(const Fragment& ending, const Fragment& begin) {
    const auto& ep = ending.polyline;
    const auto& bp = begin.polyline;
    if (ep.size() < 2 || bp.size() < 2) return 0.0;
    return heading_angle_between(ep[ep.size() - 1] - ep[ep.size() - 2], bp[1] - bp[0]);
}

std::vector<JoinCandidate> find_joinable(const Fragment& ending, std::span<const Fragment> begins, double fps,
                                         double max_deflection_deg) {
    std::vector<JoinCandidate> out;
    for (const Fragment& b : begins) {
        if (b.kind != FragmentKind::Begin || b.track_id == ending.track_id) continue;
        const int gap = b.frame - ending.frame;
        if (gap <= 0 || static_cast<double>(gap) > fps) continue;

        const Point2 shift = static_cast<double>(gap) * ending.velocity;
        if (!contains(swept_box(ending.anchor.bbox, shift), b.anchor.center)) continue;
        if (ending.direction != 0 && b.direction != 0 && ending.direction != b.direction) continue;

        const double defl = deflection_deg(ending, b);
        if (defl > max_deflection_deg) continue;

        const Point2 predicted = ending.anchor.center + shift;
        out.push_back({ending, b, defl, norm(b.anchor.center - predicted)});
    }
    return out;
}

double distance_threshold(double image_width, double image_height, double fraction) {
    return fraction * std::hypot(image_width, image_height);
}

std::optional<JoinCandidate> candidate_select(const Fragment& ending, std::span<const JoinCandidate> candidates,
                                              const DisplacementPredictor& predictor, double dist_thresh) {
    std::optional<JoinCandidate> best;
    for (const JoinCandidate& c : candidates) {
        const int gap = c.begin_fragment.frame - ending.frame;
        std::optional<Point2> disp;
        if (predictor) disp = predictor(ending, gap);
        if (!disp) disp = static_cast<double>(gap) * ending.velocity;
        const double dist = norm(c.begin_fragment.anchor.center - (ending.anchor.center + *disp));
        if (dist > dist_thresh) continue;

        JoinCandidate scored = c;
        scored.predicted_gap = dist;
        if (!best) {
            best = std::move(scored);
            continue;
        }
        const int best_gap = best->begin_fragment.frame - ending.frame;
        const auto key = std::make_tuple(dist, gap, scored.deflection_deg);
        const auto best_key = std::make_tuple(best->predicted_gap, best_gap, best->deflection_deg);
        if (key < best_key) best = std::move(scored);
    }
    return best;
}

std::vector<Track> join_tracks(std::vector<Track> tracks, double fps, double image_width, double image_height,
                               const StitchConfig& cfg, const DisplacementPredictor& predictor) {
    const double thresh = distance_threshold(image_width, image_height, cfg.dist_fraction);
    for (int pass = 0; pass < cfg.max_passes; ++pass) {
        std::sort(tracks.begin(), tracks.end(), [](const Track& a, const Track& b) { return a.id < b.id; });
        const std::vector<Fragment> frags = build_fragments(tracks, cfg.dp_epsilon);
        std::vector<Fragment> begins;
        std::vector<Fragment> ends;
        for (const auto& f : frags) (f.kind == FragmentKind::Begin ? begins : ends).push_back(f);
        std::sort(ends.begin(), ends.end(), [](const Fragment& a, const Fragment& b) {
            return std::tie(a.frame, a.track_id) < std::tie(b.frame, b.track_id);
        });

        std::set<int> consumed;
        std::map<int, int> next;  // ending track id -> continuation track id
        for (const Fragment& e : ends) {
            std::vector<Fragment> open;
            for (const auto& b : begins) {
                if (!consumed.contains(b.track_id)) open.push_back(b);
            }
            const auto cands = find_joinable(e, open, fps, cfg.max_deflection_deg);
            if (cands.empty()) continue;
            if (auto pick = candidate_select(e, cands, predictor, thresh)) {
                consumed.insert(pick->begin_fragment.track_id);
                next[e.track_id] = pick->begin_fragment.track_id;
            }
        }
        if (next.empty()) break;

        std::map<int, Track*> by_id;
        for (auto& t : tracks) by_id[t.id] = &t;
        std::vector<Track> merged;
        for (auto& t : tracks) {
            if (consumed.contains(t.id)) continue;  // not a chain head
            std::vector<Track*> chain{&t};
            for (auto it = next.find(t.id); it != next.end(); it = next.find(it->second)) {
                chain.push_back(by_id.at(it->second));
            }
            merged.push_back(merge_chain(std::move(chain)));
        }
        tracks = std::move(merged);
    }
    std::sort(tracks.begin(), tracks.end(), [](const Track& a, const Track& b) { return a.id < b.id; });
    return tracks;
}

}  // namespace bevtrack
