#pragma once

// Dataset layer: annotation records and their JSON schema, the procedural
// synthetic dataset, MSRA-style Gaussian target encoding, heatmap decoding,
// and geometric augmentation. All randomness flows through explicit seeds;
// samples derive their stream as seed XOR index so parallel and serial
// generation agree.

#include <array>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "sadinet/png_io.hpp"
#include "sadinet/rng.hpp"
#include "sadinet/tensor.hpp"

namespace sadi {

struct KeypointAnnotation {
    std::string image_id;
    std::vector<std::array<double, 2>> joints;  // image-frame (x, y)
    std::vector<std::uint8_t> visible;
    std::optional<double> norm_head;
    std::optional<double> norm_torso;
    std::array<double, 2> center{128.0, 128.0};
    double scale = 1.0;

    int joint_count() const { return static_cast<int>(joints.size()); }
};

// ---- skeleton ----

struct Skeleton {
    std::vector<std::string> joint_names;
    std::vector<std::array<int, 2>> edges;
    std::vector<std::array<int, 2>> lr_pairs;  // swapped on horizontal flips

    /// Kinematic chain head-shoulder-hip-knee-ankle-elbow-wrist, truncated or
    /// extended ("joint<k>") to J joints. Has no left/right pairs.
    static Skeleton chain(int joints) {
        if (joints < 3) throw std::invalid_argument("Skeleton::chain: need at least 3 joints");
        static const char* names[] = {"head", "shoulder", "hip", "knee", "ankle", "elbow", "wrist"};
        static const int parents[] = {-1, 0, 1, 2, 3, 1, 5};
        Skeleton s;
        for (int j = 0; j < joints; ++j) {
            if (j < 7) {
                s.joint_names.push_back(names[j]);
                if (parents[j] >= 0) s.edges.push_back({parents[j], j});
            } else {
                s.joint_names.push_back("joint" + std::to_string(j));
                s.edges.push_back({2, j});
            }
        }
        return s;
    }
};

/// Paper-table column order; joints not in this list keep their own order.
inline std::vector<int> canonical_joint_order(const Skeleton& sk) {
    static const char* order[] = {"head", "shoulder", "elbow", "wrist", "hip", "knee", "ankle"};
    std::vector<int> idx;
    for (const char* want : order)
        for (int j = 0; j < static_cast<int>(sk.joint_names.size()); ++j)
            if (sk.joint_names[static_cast<std::size_t>(j)] == want) idx.push_back(j);
    for (int j = 0; j < static_cast<int>(sk.joint_names.size()); ++j)
        if (std::find(idx.begin(), idx.end(), j) == idx.end()) idx.push_back(j);
    return idx;
}

// ---- synthetic dataset ----

struct SynthSample {
    Image8 image;
    KeypointAnnotation anno;
};

namespace detail {

inline std::array<double, 3> joint_color(int j) {
    static const std::array<double, 3> palette[] = {
        {1.00, 0.15, 0.15}, {0.15, 1.00, 0.15}, {0.15, 0.40, 1.00}, {1.00, 1.00, 0.20},
        {1.00, 0.20, 1.00}, {0.20, 1.00, 1.00}, {1.00, 0.60, 0.20}, {0.60, 0.30, 1.00},
    };
    return palette[static_cast<std::size_t>(j) % 8];
}

inline std::array<double, 2> step(std::array<double, 2> from, double len, double angle_rad,
                                  bool down) {
    // angle measured from vertical (up for torso/head, down for legs); y grows downward
    const double dy = std::cos(angle_rad) * (down ? 1.0 : -1.0);
    const double dx = std::sin(angle_rad);
    return {from[0] + len * dx, from[1] + len * dy};
}

inline void clamp_point(std::array<double, 2>& p, double lo, double hi) {
    p[0] = std::clamp(p[0], lo, hi);
    p[1] = std::clamp(p[1], lo, hi);
}

}  // namespace detail

/// Renders one sample: skeleton-constrained joint positions, per-joint colored
/// Gaussian blobs (sigma 5 px) over a smooth deterministic background.
inline SynthSample synth_sample(std::uint64_t seed, std::uint64_t index, int joints,
                                int image_size = 256) {
    Rng rng(seed ^ index);
    const double deg = 3.14159265358979323846 / 180.0;
    const double u = image_size / 256.0;  // lengths tuned on the 256 frame
    std::vector<std::array<double, 2>> pts(static_cast<std::size_t>(joints));

    const double cx = image_size / 2.0;
    std::array<double, 2> hip{cx + rng.uniform(-32, 32) * u,
                              image_size * 0.59 + rng.uniform(-25, 25) * u};
    const double torso_angle = rng.uniform(-25, 25) * deg;
    std::array<double, 2> shoulder =
        detail::step(hip, rng.uniform(70, 100) * u, torso_angle, false);
    std::array<double, 2> head = detail::step(shoulder, rng.uniform(35, 50) * u,
                                              torso_angle + rng.uniform(-20, 20) * deg, false);
    pts[0] = head;
    pts[1] = shoulder;
    if (joints > 2) pts[2] = hip;
    if (joints > 3)
        pts[3] = detail::step(hip, rng.uniform(55, 85) * u, rng.uniform(-35, 35) * deg, true);
    if (joints > 4)
        pts[4] = detail::step(pts[3], rng.uniform(50, 75) * u, rng.uniform(-30, 30) * deg, true);
    if (joints > 5)
        pts[5] = detail::step(shoulder, rng.uniform(45, 65) * u, rng.uniform(35, 145) * deg, true);
    if (joints > 6)
        pts[6] = detail::step(pts[5], rng.uniform(40, 60) * u, rng.uniform(0, 180) * deg, true);
    for (int j = 7; j < joints; ++j)
        pts[static_cast<std::size_t>(j)] = {hip[0] + rng.uniform(-70, 70) * u,
                                            hip[1] + rng.uniform(-70, 70) * u};
    const double margin = 12.0 * u;
    for (auto& p : pts) detail::clamp_point(p, margin, image_size - 1 - margin);

    SynthSample s;
    s.image.width = image_size;
    s.image.height = image_size;
    s.image.channels = 3;
    s.image.pixels.assign(static_cast<std::size_t>(image_size) * image_size * 3, 0);

    // smooth background so blob argmaxes stay put
    const double bga = rng.uniform(0.5, 2.0), bgb = rng.uniform(0.5, 2.0);
    const double bgp = rng.uniform(0.0, 6.28);
    const double blob_sigma = std::max(5.0 * u, 1.5), amp = 0.9;
    const double inv2s2 = 1.0 / (2.0 * blob_sigma * blob_sigma);
    for (int y = 0; y < image_size; ++y) {
        for (int x = 0; x < image_size; ++x) {
            const double bg =
                0.05 + 0.04 * std::sin((bga * x + bgb * y) * 6.28318 / image_size + bgp);
            double rgb[3] = {bg, bg, bg};
            for (int j = 0; j < joints; ++j) {
                const auto& p = pts[static_cast<std::size_t>(j)];
                const double dx = x - p[0], dy = y - p[1];
                const double d2 = dx * dx + dy * dy;
                if (d2 > 9.0 * blob_sigma * blob_sigma) continue;
                const double v = amp * std::exp(-d2 * inv2s2);
                const auto c = detail::joint_color(j);
                for (int ch = 0; ch < 3; ++ch) rgb[ch] += v * c[static_cast<std::size_t>(ch)];
            }
            for (int ch = 0; ch < 3; ++ch)
                s.image.at(y, x, ch) =
                    static_cast<std::uint8_t>(std::lround(255.0 * std::clamp(rgb[ch], 0.0, 1.0)));
        }
    }

    s.anno.image_id = "synth_" + std::to_string(seed) + "_" + std::to_string(index);
    s.anno.joints = pts;
    s.anno.visible.assign(static_cast<std::size_t>(joints), 1);
    s.anno.center = {image_size / 2.0, image_size / 2.0};
    s.anno.scale = 1.0;
    const double hx = pts[0][0] - pts[1][0], hy = pts[0][1] - pts[1][1];
    s.anno.norm_head = std::sqrt(hx * hx + hy * hy);
    if (joints > 2) {
        const double tx = pts[1][0] - pts[2][0], ty = pts[1][1] - pts[2][1];
        s.anno.norm_torso = std::sqrt(tx * tx + ty * ty);
    }
    return s;
}

inline std::vector<SynthSample> synth_dataset(int n, int joints, std::uint64_t seed,
                                              int image_size = 256) {
    if (n < 1) throw std::invalid_argument("synth_dataset: n must be >= 1");
    std::vector<SynthSample> out(static_cast<std::size_t>(n));
#pragma omp parallel for schedule(static)
    for (int i = 0; i < n; ++i)
        out[static_cast<std::size_t>(i)] =
            synth_sample(seed, static_cast<std::uint64_t>(i), joints, image_size);
    return out;
}

// ---- tensors from samples ----

/// [N,3,S,S] image batch scaled to [0,1]; grayscale inputs are replicated.
inline Tensor images_to_tensor(const std::vector<const Image8*>& images) {
    if (images.empty()) throw std::invalid_argument("images_to_tensor: empty batch");
    const int S = images[0]->width;
    Tensor t(Shape{static_cast<int>(images.size()), 3, S, S});
    double* d = t.data();
    for (std::size_t n = 0; n < images.size(); ++n) {
        const Image8& im = *images[n];
        if (im.width != S || im.height != S)
            throw std::invalid_argument("images_to_tensor: inconsistent image sizes");
        for (int c = 0; c < 3; ++c) {
            const int src_c = im.channels == 1 ? 0 : c;
            for (int y = 0; y < S; ++y)
                for (int x = 0; x < S; ++x)
                    d[((n * 3 + static_cast<std::size_t>(c)) * S + static_cast<std::size_t>(y)) * S +
                      static_cast<std::size_t>(x)] = im.at(y, x, src_c) / 255.0;
        }
    }
    return t;
}

// ---- Gaussian heatmap codec ----

struct GaussianEncodeConfig {
    double sigma_px = 2.0;  // grid units
    double amplitude = 1.0;
    int grid = 64;
};

/// Per-joint target map exp(-|p - mu|^2 / (2 sigma^2)) evaluated at pixel
/// centers, with mu in grid coordinates. Invisible or off-grid joints give a
/// zero map (and off-grid clears the visibility output).
inline Tensor encode_gaussian(const std::vector<std::array<double, 2>>& joints_grid,
                              std::vector<std::uint8_t>& visible,
                              const GaussianEncodeConfig& cfg = {}) {
    if (cfg.sigma_px <= 0.0) throw std::invalid_argument("encode_gaussian: sigma must be > 0");
    const int J = static_cast<int>(joints_grid.size());
    const int G = cfg.grid;
    Tensor maps(Shape{J, G, G});
    const double inv = 1.0 / (2.0 * cfg.sigma_px * cfg.sigma_px);
    for (int j = 0; j < J; ++j) {
        const auto& mu = joints_grid[static_cast<std::size_t>(j)];
        const bool on_grid = mu[0] >= 0.0 && mu[0] <= G - 1 && mu[1] >= 0.0 && mu[1] <= G - 1;
        if (!visible[static_cast<std::size_t>(j)] || !on_grid) {
            if (!on_grid) visible[static_cast<std::size_t>(j)] = 0;
            continue;
        }
        for (int y = 0; y < G; ++y)
            for (int x = 0; x < G; ++x) {
                const double dx = x - mu[0], dy = y - mu[1];
                maps.at({j, y, x}) = cfg.amplitude * std::exp(-(dx * dx + dy * dy) * inv);
            }
    }
    return maps;
}

struct DecodedJoint {
    double x = 0.0, y = 0.0;
    bool degenerate = false;
};

/// Argmax decode with deterministic tie-breaking (lowest row, then lowest
/// column) and a quarter-pixel shift toward the larger neighbor per axis.
/// An all-equal map returns the grid center flagged degenerate.
inline std::vector<DecodedJoint> decode_heatmap(const Tensor& maps) {
    if (maps.rank() != 3)
        throw std::invalid_argument("decode_heatmap: expected [J,H,W], got " +
                                    shape_str(maps.shape()));
    const int J = maps.dim(0), H = maps.dim(1), W = maps.dim(2);
    std::vector<DecodedJoint> out(static_cast<std::size_t>(J));
    for (int j = 0; j < J; ++j) {
        const double* m = maps.data() + static_cast<std::size_t>(j) * H * W;
        int by = 0, bx = 0;
        double best = m[0], worst = m[0];
        for (int y = 0; y < H; ++y)
            for (int x = 0; x < W; ++x) {
                const double v = m[y * W + x];
                worst = std::min(worst, v);
                if (v > best) {
                    best = v;
                    by = y;
                    bx = x;
                }
            }
        DecodedJoint d;
        if (best == worst) {
            d.x = W / 2.0;
            d.y = H / 2.0;
            d.degenerate = true;
        } else {
            d.x = bx;
            d.y = by;
            if (bx > 0 && bx + 1 < W) {
                const double l = m[by * W + bx - 1], r = m[by * W + bx + 1];
                if (r > l) d.x += 0.25;
                else if (l > r) d.x -= 0.25;
            }
            if (by > 0 && by + 1 < H) {
                const double u = m[(by - 1) * W + bx], v = m[(by + 1) * W + bx];
                if (v > u) d.y += 0.25;
                else if (u > v) d.y -= 0.25;
            }
        }
        out[static_cast<std::size_t>(j)] = d;
    }
    return out;
}

// ---- augmentation ----

struct AugmentDraw {
    double rot_deg = 0.0;
    double scale = 1.0;
    bool flip = false;
};

struct AugmentResult {
    Image8 image;
    KeypointAnnotation anno;
    std::array<double, 6> fwd{1, 0, 0, 0, 1, 0};  // row-major 2x3 forward map
    AugmentDraw draw;
};

/// Applies a fixed draw: rotation and scale about the image center, optional
/// horizontal flip (left/right ids swapped per skeleton); joints follow the
/// same affine and visibility is cleared outside the frame.
inline AugmentResult augment_with(const Image8& image, const KeypointAnnotation& anno,
                                  const Skeleton& skeleton, const AugmentDraw& draw) {
    AugmentResult r;
    r.draw = draw;

    const double W = image.width, H = image.height;
    const double cx = (W - 1) / 2.0, cy = (H - 1) / 2.0;
    const double th = r.draw.rot_deg * 3.14159265358979323846 / 180.0;
    const double s = r.draw.scale;
    const double fx = r.draw.flip ? -1.0 : 1.0;
    // p' = c + R(th) * s * F * (p - c)
    const double a = s * std::cos(th) * fx, b = -s * std::sin(th);
    const double c = s * std::sin(th) * fx, d = s * std::cos(th);
    r.fwd = {a, b, cx - a * cx - b * cy, c, d, cy - c * cx - d * cy};

    // inverse map for resampling
    const double det = a * d - b * c;
    const double ia = d / det, ib = -b / det, ic = -c / det, id = a / det;

    r.image.width = image.width;
    r.image.height = image.height;
    r.image.channels = image.channels;
    r.image.pixels.assign(image.pixels.size(), 0);
    for (int y = 0; y < image.height; ++y)
        for (int x = 0; x < image.width; ++x) {
            const double qx = x - r.fwd[2], qy = y - r.fwd[5];
            const double ux = ia * qx + ib * qy;
            const double uy = ic * qx + id * qy;
            const int x0 = static_cast<int>(std::floor(ux)), y0 = static_cast<int>(std::floor(uy));
            const double wx = ux - x0, wy = uy - y0;
            for (int ch = 0; ch < image.channels; ++ch) {
                double acc = 0.0;
                for (int dy2 = 0; dy2 <= 1; ++dy2)
                    for (int dx2 = 0; dx2 <= 1; ++dx2) {
                        const int px = x0 + dx2, py = y0 + dy2;
                        if (px < 0 || px >= image.width || py < 0 || py >= image.height) continue;
                        const double wgt = (dx2 ? wx : 1.0 - wx) * (dy2 ? wy : 1.0 - wy);
                        acc += wgt * image.at(py, px, ch);
                    }
                r.image.at(y, x, ch) =
                    static_cast<std::uint8_t>(std::lround(std::clamp(acc, 0.0, 255.0)));
            }
        }

    r.anno = anno;
    for (std::size_t j = 0; j < anno.joints.size(); ++j) {
        const auto& p = anno.joints[j];
        r.anno.joints[j] = {r.fwd[0] * p[0] + r.fwd[1] * p[1] + r.fwd[2],
                            r.fwd[3] * p[0] + r.fwd[4] * p[1] + r.fwd[5]};
        const auto& q = r.anno.joints[j];
        if (q[0] < 0 || q[0] > W - 1 || q[1] < 0 || q[1] > H - 1) r.anno.visible[j] = 0;
    }
    if (r.draw.flip) {
        for (const auto& pair : skeleton.lr_pairs) {
            std::swap(r.anno.joints[static_cast<std::size_t>(pair[0])],
                      r.anno.joints[static_cast<std::size_t>(pair[1])]);
            std::swap(r.anno.visible[static_cast<std::size_t>(pair[0])],
                      r.anno.visible[static_cast<std::size_t>(pair[1])]);
        }
    }
    // norms scale with the drawn factor
    if (r.anno.norm_head) r.anno.norm_head = *r.anno.norm_head * s;
    if (r.anno.norm_torso) r.anno.norm_torso = *r.anno.norm_torso * s;
    return r;
}

/// Random draw: rotation in [-80, 80] degrees, scale in [0.5, 1.5], flip with
/// probability 0.5.
inline AugmentResult augment(const Image8& image, const KeypointAnnotation& anno,
                             const Skeleton& skeleton, Rng& rng) {
    AugmentDraw draw;
    draw.rot_deg = rng.uniform(-80.0, 80.0);
    draw.scale = rng.uniform(0.5, 1.5);
    draw.flip = rng.bernoulli(0.5);
    return augment_with(image, anno, skeleton, draw);
}

// ---- annotation JSON ----

struct LoadReport {
    std::vector<KeypointAnnotation> annotations;
    int skipped = 0;
    std::vector<std::string> errors;
};

inline nlohmann::json annotation_to_json(const KeypointAnnotation& a) {
    nlohmann::json rec;
    rec["image_id"] = a.image_id;
    auto joints = nlohmann::json::array();
    for (const auto& p : a.joints) joints.push_back({p[0], p[1]});
    rec["joints"] = joints;
    auto vis = nlohmann::json::array();
    for (auto v : a.visible) vis.push_back(static_cast<bool>(v));
    rec["visible"] = vis;
    if (a.norm_head) rec["norm_head"] = *a.norm_head;
    if (a.norm_torso) rec["norm_torso"] = *a.norm_torso;
    rec["center"] = {a.center[0], a.center[1]};
    rec["scale"] = a.scale;
    return rec;
}

inline void save_annotations(const std::vector<KeypointAnnotation>& annos,
                             const std::string& path) {
    nlohmann::json arr = nlohmann::json::array();
    for (const auto& a : annos) arr.push_back(annotation_to_json(a));
    std::ofstream f(path);
    if (!f) throw std::runtime_error("save_annotations: cannot open " + path);
    f << arr.dump(1) << "\n";
}

inline LoadReport load_annotations(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw std::runtime_error("load_annotations: cannot open " + path);
    nlohmann::json arr;
    try {
        f >> arr;
    } catch (const nlohmann::json::exception& e) {
        throw std::runtime_error("load_annotations: " + path + " is not valid JSON: " + e.what());
    }
    if (!arr.is_array()) throw std::runtime_error("load_annotations: top level must be an array");

    LoadReport report;
    int expected_joints = -1;
    for (std::size_t i = 0; i < arr.size(); ++i) {
        const auto& rec = arr[i];
        auto fail = [&](const std::string& why) {
            ++report.skipped;
            report.errors.push_back("record " + std::to_string(i) + ": " + why);
        };
        try {
            KeypointAnnotation a;
            a.image_id = rec.at("image_id").get<std::string>();
            for (const auto& p : rec.at("joints")) {
                a.joints.push_back({p.at(0).get<double>(), p.at(1).get<double>()});
            }
            for (const auto& v : rec.at("visible")) a.visible.push_back(v.get<bool>() ? 1 : 0);
            if (a.visible.size() != a.joints.size()) {
                fail("joints/visible length mismatch");
                continue;
            }
            if (rec.contains("norm_head")) a.norm_head = rec["norm_head"].get<double>();
            if (rec.contains("norm_torso")) a.norm_torso = rec["norm_torso"].get<double>();
            if (!a.norm_head && !a.norm_torso) {
                fail("missing both norm_head and norm_torso");
                continue;
            }
            if (rec.contains("center"))
                a.center = {rec["center"].at(0).get<double>(), rec["center"].at(1).get<double>()};
            if (rec.contains("scale")) a.scale = rec["scale"].get<double>();
            if (expected_joints < 0) expected_joints = a.joint_count();
            if (a.joint_count() != expected_joints) {
                fail("joint count " + std::to_string(a.joint_count()) + " differs from first record's " +
                     std::to_string(expected_joints));
                continue;
            }
            report.annotations.push_back(std::move(a));
        } catch (const nlohmann::json::exception& e) {
            fail(e.what());
        }
    }
    return report;
}

}  // namespace sadi
