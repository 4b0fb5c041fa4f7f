#include "bevtrack/tracking.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include <Eigen/Dense>

#include "bevtrack/error.hpp"

namespace bevtrack {

double iou(const BBox& a, const BBox& b) {
    const double ix = std::max(0.0, std::min(a.x + a.w, b.x + b.w) - std::max(a.x, b.x));
    const double iy = std::max(0.0, std::min(a.y + a.h, b.y + b.h) - std::max(a.y, b.y));
    const double inter = ix * iy;
    if (inter <= 0.0) return 0.0;
    const double uni = a.w * a.h + b.w * b.h - inter;
    return uni > 0.0 ? std::min(1.0, inter / uni) : 0.0;
}

// ---------------------------------------------------------------------------

namespace {

Eigen::Matrix4d transition() {
    Eigen::Matrix4d f = Eigen::Matrix4d::Identity();
    f(0, 2) = 1.0;
    f(1, 3) = 1.0;
    return f;
}

Eigen::Matrix4d symmetrize(const Eigen::Matrix4d& m) { return 0.5 * (m + m.transpose()); }

}  // namespace

KalmanState kf_init(BevPoint z, const KalmanParams& p) {
    KalmanState s;
    s.mean << z.x, z.y, 0.0, 0.0;
    s.cov = Eigen::Vector4d(p.r_pos, p.r_pos, p.init_vel_var, p.init_vel_var).asDiagonal();
    return s;
}

KalmanState kf_predict(const KalmanState& s, const KalmanParams& p) {
    const Eigen::Matrix4d f = transition();
    KalmanState out;
    out.mean = f * s.mean;
    out.cov = symmetrize(f * s.cov * f.transpose() +
                         Eigen::Matrix4d(Eigen::Vector4d(p.q_pos, p.q_pos, p.q_vel, p.q_vel).asDiagonal()));
    return out;
}

KalmanState kf_update(const KalmanState& s, BevPoint z, const KalmanParams& p) {
    Eigen::Matrix<double, 2, 4> h = Eigen::Matrix<double, 2, 4>::Zero();
    h(0, 0) = 1.0;
    h(1, 1) = 1.0;
    const Eigen::Matrix2d r = Eigen::Matrix2d::Identity() * p.r_pos;
    const Eigen::Matrix2d innov_cov = h * s.cov * h.transpose() + r;
    const double det = innov_cov.determinant();
    if (!std::isfinite(det) || det <= 0.0) {
        throw Error(Errc::NumericallySingular, "innovation covariance is not invertible");
    }
    const Eigen::Matrix<double, 4, 2> gain = s.cov * h.transpose() * innov_cov.inverse();
    const Eigen::Vector2d innov = Eigen::Vector2d(z.x, z.y) - h * s.mean;

    KalmanState out;
    out.mean = s.mean + gain * innov;
    // Joseph form keeps the covariance PSD under rounding.
    const Eigen::Matrix4d ikh = Eigen::Matrix4d::Identity() - gain * h;
    out.cov = symmetrize(ikh * s.cov * ikh.transpose() + gain * r * gain.transpose());
    return out;
}

// ---------------------------------------------------------------------------
// Hungarian algorithm (shortest augmenting path, potentials), rows <= cols.

namespace {

std::vector<int> hungarian_rows_le_cols(const Eigen::MatrixXd& a) {
    const int n = static_cast<int>(a.rows());
    const int m = static_cast<int>(a.cols());
    const double inf = std::numeric_limits<double>::infinity();
    std::vector<double> u(n + 1, 0.0);
    std::vector<double> v(m + 1, 0.0);
    std::vector<int> match(m + 1, 0);  // match[j] = row (1-based) assigned to column j
    std::vector<int> way(m + 1, 0);
    for (int i = 1; i <= n; ++i) {
        match[0] = i;
        int j0 = 0;
        std::vector<double> minv(m + 1, inf);
        std::vector<char> used(m + 1, 0);
        do {
            used[j0] = 1;
            const int i0 = match[j0];
            double delta = inf;
            int j1 = 0;
            for (int j = 1; j <= m; ++j) {
                if (used[j]) continue;
                const double cur = a(i0 - 1, j - 1) - u[i0] - v[j];
                if (cur < minv[j]) {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if (minv[j] < delta) {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for (int j = 0; j <= m; ++j) {
                if (used[j]) {
                    u[match[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
        } while (match[j0] != 0);
        do {
            const int j1 = way[j0];
            match[j0] = match[j1];
            j0 = j1;
        } while (j0 != 0);
    }
    std::vector<int> row_to_col(n, -1);
    for (int j = 1; j <= m; ++j) {
        if (match[j] != 0) row_to_col[match[j] - 1] = j - 1;
    }
    return row_to_col;
}

}  // namespace

std::vector<std::pair<int, int>> assign_min_cost(const Eigen::MatrixXd& cost, double max_cost) {
    std::vector<std::pair<int, int>> out;
    if (cost.rows() == 0 || cost.cols() == 0) return out;

    // Forbidden entries get a penalty larger than any sum of admissible costs,
    // so the solver maximizes the number of admissible pairs first.
    double lo = 0.0;
    double hi = 0.0;
    bool any_ok = false;
    for (Eigen::Index i = 0; i < cost.rows(); ++i) {
        for (Eigen::Index j = 0; j < cost.cols(); ++j) {
            const double c = cost(i, j);
            if (std::isfinite(c) && c <= max_cost) {
                lo = any_ok ? std::min(lo, c) : c;
                hi = any_ok ? std::max(hi, c) : c;
                any_ok = true;
            }
        }
    }
    if (!any_ok) return out;
    const double span = hi - lo + 1.0;
    const double penalty = span * static_cast<double>(std::min(cost.rows(), cost.cols()) + 1);
    Eigen::MatrixXd work(cost.rows(), cost.cols());
    for (Eigen::Index i = 0; i < cost.rows(); ++i) {
        for (Eigen::Index j = 0; j < cost.cols(); ++j) {
            const double c = cost(i, j);
            work(i, j) = (std::isfinite(c) && c <= max_cost) ? c - lo : penalty;
        }
    }

    const bool transposed = work.rows() > work.cols();
    const Eigen::MatrixXd solve = transposed ? Eigen::MatrixXd(work.transpose()) : work;
    const std::vector<int> assign = hungarian_rows_le_cols(solve);
    for (int r = 0; r < static_cast<int>(assign.size()); ++r) {
        const int c = assign[r];
        if (c < 0) continue;
        const int row = transposed ? c : r;
        const int col = transposed ? r : c;
        const double v = cost(row, col);
        if (std::isfinite(v) && v <= max_cost) out.emplace_back(row, col);
    }
    std::sort(out.begin(), out.end());
    return out;
}

// ---------------------------------------------------------------------------

BBox Track::predicted_box() const {
    const BBox& last = entries.back().det.bbox;
    return BBox::centered(filter.position(), last.w, last.h);
}

void Track::append(const BevDetection& det, const KalmanState& state, AssocStage stage) {
    entries.push_back({det.frame, state, det, stage});
    filter = state;
    misses = 0;
    max_score = std::max(max_score, det.score);
    refresh_class();
}

void Track::refresh_class() {
    std::map<std::string, std::pair<int, double>> votes;
    for (const auto& e : entries) {
        auto& v = votes[e.det.cls];
        v.first += 1;
        v.second += e.det.score;
    }
    const auto best = std::max_element(votes.begin(), votes.end(), [](const auto& a, const auto& b) {
        if (a.second.first != b.second.first) return a.second.first < b.second.first;
        return a.second.second < b.second.second;
    });
    if (best != votes.end()) cls = best->first;
}

namespace {

Track spawn(int id, const BevDetection& det, const KalmanParams& kf) {
    Track t;
    t.id = id;
    t.append(det, kf_init(det.center, kf), AssocStage::Birth);
    return t;
}

void check_frame(int frame, int last_frame, std::span<const BevDetection> dets) {
    if (frame <= last_frame) {
        throw Error(Errc::FrameOrder, "frame " + std::to_string(frame) + " does not follow " +
                                          std::to_string(last_frame));
    }
    for (const auto& d : dets) {
        if (d.frame != frame) throw Error(Errc::FrameOrder, "detection frame differs from step frame");
    }
}

// Negated similarity so that "similarity >= threshold" is exactly "cost <= -threshold".
Eigen::MatrixXd iou_cost(const std::vector<Track>& tracks, const std::vector<int>& track_idx,
                         std::span<const BevDetection> dets, const std::vector<int>& det_idx,
                         bool class_weighted) {
    Eigen::MatrixXd c(static_cast<Eigen::Index>(track_idx.size()), static_cast<Eigen::Index>(det_idx.size()));
    for (std::size_t i = 0; i < track_idx.size(); ++i) {
        const Track& t = tracks[track_idx[i]];
        const BBox pred = t.predicted_box();
        for (std::size_t j = 0; j < det_idx.size(); ++j) {
            const BevDetection& d = dets[det_idx[j]];
            double sim = iou(pred, d.bbox);
            if (class_weighted && d.cls != t.cls) sim *= 0.5;
            c(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = -sim;
        }
    }
    return c;
}

std::vector<int> iota(std::size_t n) {
    std::vector<int> v(n);
    for (std::size_t i = 0; i < n; ++i) v[i] = static_cast<int>(i);
    return v;
}

}  // namespace

// ---------------------------------------------------------------------------

MotpyTracker::MotpyTracker(MotpyConfig cfg, KalmanParams kf) : cfg_(cfg), kf_(kf) {
    if (cfg_.sigma_l > cfg_.sigma_h) throw Error(Errc::ConfigError, "sigma_l must not exceed sigma_h");
}

bool MotpyTracker::finishable(const Track& t) const {
    return t.max_score >= cfg_.sigma_h || static_cast<int>(t.size()) >= cfg_.min_tsize;
}

StepResult MotpyTracker::step(int frame, std::span<const BevDetection> all_dets) {
    check_frame(frame, last_frame_, all_dets);
    last_frame_ = frame;

    std::vector<int> det_idx;
    for (std::size_t j = 0; j < all_dets.size(); ++j) {
        if (all_dets[j].score >= cfg_.sigma_l) det_idx.push_back(static_cast<int>(j));
    }
    for (auto& t : active_) t.filter = kf_predict(t.filter, kf_);

    const std::vector<int> track_idx = iota(active_.size());
    std::vector<char> track_matched(active_.size(), 0);
    std::vector<char> det_used(all_dets.size(), 0);
    if (!track_idx.empty() && !det_idx.empty()) {
        const Eigen::MatrixXd cost = iou_cost(active_, track_idx, all_dets, det_idx, true);
        for (const auto& [r, c] : assign_min_cost(cost, -cfg_.sigma_iou)) {
            Track& t = active_[track_idx[r]];
            const BevDetection& d = all_dets[det_idx[c]];
            t.append(d, kf_update(t.filter, d.center, kf_), AssocStage::Motpy);
            track_matched[track_idx[r]] = 1;
            det_used[det_idx[c]] = 1;
        }
    }

    StepResult result;
    std::vector<Track> kept;
    kept.reserve(active_.size());
    for (std::size_t i = 0; i < active_.size(); ++i) {
        Track& t = active_[i];
        if (track_matched[i]) {
            kept.push_back(std::move(t));
        } else if (t.misses < cfg_.max_coast) {
            ++t.misses;
            kept.push_back(std::move(t));
        } else if (finishable(t)) {
            t.status = TrackStatus::Finished;
            result.finished.push_back(std::move(t));
        }
    }
    for (int j : det_idx) {
        if (!det_used[j]) kept.push_back(spawn(next_id_++, all_dets[j], kf_));
    }
    active_ = std::move(kept);
    return result;
}

std::vector<Track> MotpyTracker::flush() {
    std::vector<Track> out;
    for (auto& t : active_) {
        if (finishable(t)) {
            t.status = TrackStatus::Finished;
            out.push_back(std::move(t));
        }
    }
    active_.clear();
    return out;
}

// ---------------------------------------------------------------------------

ByteTracker::ByteTracker(ByteConfig cfg, KalmanParams kf) : cfg_(cfg), kf_(kf) {
    if (cfg_.max_coast < 0) throw Error(Errc::ConfigError, "max_coast must be non-negative");
}

StepResult ByteTracker::step(int frame, std::span<const BevDetection> dets) {
    check_frame(frame, last_frame_, dets);
    last_frame_ = frame;

    std::vector<int> high;
    std::vector<int> low;
    for (std::size_t j = 0; j < dets.size(); ++j) {
        (dets[j].score > cfg_.tau ? high : low).push_back(static_cast<int>(j));
    }
    for (auto& t : tracks_) t.filter = kf_predict(t.filter, kf_);

    std::vector<char> matched(tracks_.size(), 0);
    std::vector<char> high_used(dets.size(), 0);

    // First association: every track against the high-score detections.
    std::vector<int> all_tracks = iota(tracks_.size());
    if (!all_tracks.empty() && !high.empty()) {
        const Eigen::MatrixXd cost = iou_cost(tracks_, all_tracks, dets, high, false);
        for (const auto& [r, c] : assign_min_cost(cost, -cfg_.match_thresh_high)) {
            Track& t = tracks_[all_tracks[r]];
            const BevDetection& d = dets[high[c]];
            t.append(d, kf_update(t.filter, d.center, kf_), AssocStage::First);
            matched[all_tracks[r]] = 1;
            high_used[high[c]] = 1;
        }
    }

    // Second association: leftover tracks against the low-score detections.
    std::vector<int> remain;
    for (std::size_t i = 0; i < tracks_.size(); ++i) {
        if (!matched[i]) remain.push_back(static_cast<int>(i));
    }
    if (!remain.empty() && !low.empty()) {
        const Eigen::MatrixXd cost = iou_cost(tracks_, remain, dets, low, false);
        for (const auto& [r, c] : assign_min_cost(cost, -cfg_.match_thresh_low)) {
            Track& t = tracks_[remain[r]];
            const BevDetection& d = dets[low[c]];
            t.append(d, kf_update(t.filter, d.center, kf_), AssocStage::Second);
            matched[remain[r]] = 1;
        }
    }

    StepResult result;
    std::vector<Track> kept;
    kept.reserve(tracks_.size());
    for (std::size_t i = 0; i < tracks_.size(); ++i) {
        Track& t = tracks_[i];
        if (!matched[i] && ++t.misses > cfg_.max_coast) {
            t.status = TrackStatus::Finished;
            result.finished.push_back(std::move(t));
        } else {
            kept.push_back(std::move(t));
        }
    }
    // Only unmatched high-score detections start tracks.
    for (int j : high) {
        if (!high_used[j]) kept.push_back(spawn(next_id_++, dets[j], kf_));
    }
    tracks_ = std::move(kept);
    return result;
}

std::vector<Track> ByteTracker::flush() {
    std::vector<Track> out = std::move(tracks_);
    for (auto& t : out) t.status = TrackStatus::Finished;
    tracks_.clear();
    return out;
}

// ---------------------------------------------------------------------------

BevBoxSizer::BevBoxSizer(std::map<std::string, std::pair<double, double>> defaults, int warmup_count,
                         std::pair<double, double> fallback)
    : defaults_(std::move(defaults)), warmup_(std::max(warmup_count, 1)), fallback_(fallback) {
    for (const auto& [cls, wh] : defaults_) {
        if (!(wh.first > 0.0 && wh.second > 0.0)) {
            throw Error(Errc::ConfigError, "default BEV size for '" + cls + "' must be positive");
        }
    }
}

void BevBoxSizer::observe(const std::string& cls, double w, double h) {
    auto& s = stats_[cls];
    s.sum_w += w;
    s.sum_h += h;
    ++s.n;
}

std::pair<double, double> BevBoxSizer::size(const std::string& cls) const {
    if (const auto it = stats_.find(cls); it != stats_.end() && it->second.n >= warmup_) {
        return {it->second.sum_w / it->second.n, it->second.sum_h / it->second.n};
    }
    if (const auto it = defaults_.find(cls); it != defaults_.end()) return it->second;
    return fallback_;
}

}  // namespace bevtrack
