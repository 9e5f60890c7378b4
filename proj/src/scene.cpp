#include "penet/scene.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <random>

#include "penet/errors.hpp"

namespace penet {
namespace {

using Vec3d = std::array<double, 3>;
constexpr double kPi = std::numbers::pi;

struct SurfacePoint {
  Vec3d p;
  Vec3d n;
};

uint64_t mix(uint64_t x) {
  x += 0x9e3779b97f4a7c15ull;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
  return x ^ (x >> 31);
}

Vec3f hsv_to_rgb(double h, double s, double v) {
  h = h - std::floor(h);
  const double c = v * s;
  const double hp = h * 6.0;
  const double x = c * (1 - std::fabs(std::fmod(hp, 2.0) - 1));
  double r = 0, g = 0, b = 0;
  if (hp < 1) { r = c; g = x; }
  else if (hp < 2) { r = x; g = c; }
  else if (hp < 3) { g = c; b = x; }
  else if (hp < 4) { g = x; b = c; }
  else if (hp < 5) { r = x; b = c; }
  else { r = c; b = x; }
  const double m = v - c;
  return {static_cast<float>(r + m), static_cast<float>(g + m), static_cast<float>(b + m)};
}

double uniform(std::mt19937_64& rng, double lo, double hi) {
  return std::uniform_real_distribution<double>(lo, hi)(rng);
}

double surface_area(const ClassShape& s, double scale) {
  const auto& d = s.dims;
  switch (s.family) {
    case Primitive::Plane:
      return d[0] * d[1] * scale * scale;
    case Primitive::Box:
      return (d[0] * d[1] + 2 * d[2] * (d[0] + d[1])) * scale * scale;
    case Primitive::Cylinder:
      return (2 * kPi * d[0] * d[1] + kPi * d[0] * d[0]) * scale * scale;
    case Primitive::Sphere:
      return 4 * kPi * d[0] * d[0] * scale * scale;
    case Primitive::TorusSegment:
      return d[2] * d[0] * 2 * kPi * d[1] * scale * scale;
  }
  return 0;
}

/// Horizontal radius of the object's footprint, used for placement.
double footprint(const ClassShape& s, double scale) {
  const auto& d = s.dims;
  switch (s.family) {
    case Primitive::Plane:
      return 0.5 * std::hypot(d[0], s.upright ? 0.02 : d[1]) * scale;
    case Primitive::Box:
      return 0.5 * std::hypot(d[0], d[1]) * scale;
    case Primitive::Cylinder:
    case Primitive::Sphere:
      return d[0] * scale;
    case Primitive::TorusSegment:
      return (d[0] + d[1]) * scale;
  }
  return 0.1;
}

/// Samples one point on the canonical (unrotated, base at origin) surface.
SurfacePoint sample_surface(const ClassShape& s, double scale, std::mt19937_64& rng) {
  const auto& d = s.dims;
  switch (s.family) {
    case Primitive::Plane: {
      const double w = d[0] * scale, h = d[1] * scale;
      const double u = uniform(rng, -0.5, 0.5), v = uniform(rng, 0, 1);
      if (s.upright) return {{u * w, 0.0, v * h + d[2]}, {0, 1, 0}};
      return {{u * w, (v - 0.5) * h, d[2]}, {0, 0, 1}};
    }
    case Primitive::Box: {
      const double w = d[0] * scale, dp = d[1] * scale, h = d[2] * scale;
      const double top = w * dp, sx = dp * h, sy = w * h;
      const double pick = uniform(rng, 0, top + 2 * sx + 2 * sy);
      const double u = uniform(rng, -0.5, 0.5), v = uniform(rng, 0, 1);
      if (pick < top) return {{u * w, (v - 0.5) * dp, h}, {0, 0, 1}};
      if (pick < top + sx) return {{0.5 * w, u * dp, v * h}, {1, 0, 0}};
      if (pick < top + 2 * sx) return {{-0.5 * w, u * dp, v * h}, {-1, 0, 0}};
      if (pick < top + 2 * sx + sy) return {{u * w, 0.5 * dp, v * h}, {0, 1, 0}};
      return {{u * w, -0.5 * dp, v * h}, {0, -1, 0}};
    }
    case Primitive::Cylinder: {
      const double r = d[0] * scale, h = d[1] * scale;
      const double side = 2 * kPi * r * h, cap = kPi * r * r;
      if (uniform(rng, 0, side + cap) < side) {
        const double a = uniform(rng, 0, 2 * kPi);
        return {{r * std::cos(a), r * std::sin(a), uniform(rng, 0, h)},
                {std::cos(a), std::sin(a), 0}};
      }
      const double a = uniform(rng, 0, 2 * kPi), rr = r * std::sqrt(uniform(rng, 0, 1));
      return {{rr * std::cos(a), rr * std::sin(a), h}, {0, 0, 1}};
    }
    case Primitive::Sphere: {
      const double r = d[0] * scale;
      std::normal_distribution<double> g(0.0, 1.0);
      Vec3d u{g(rng), g(rng), g(rng)};
      double norm = std::sqrt(u[0] * u[0] + u[1] * u[1] + u[2] * u[2]);
      while (norm < 1e-12) {
        u = {g(rng), g(rng), g(rng)};
        norm = std::sqrt(u[0] * u[0] + u[1] * u[1] + u[2] * u[2]);
      }
      for (auto& c : u) c /= norm;
      const double cz = r + d[1];
      return {{r * u[0], r * u[1], cz + r * u[2]}, u};
    }
    case Primitive::TorusSegment: {
      const double big = d[0] * scale, small = d[1] * scale, span = d[2];
      double theta = 0, psi = 0;
      // Rejection on the area element (R + r cos psi).
      for (;;) {
        theta = uniform(rng, 0, span);
        psi = uniform(rng, 0, 2 * kPi);
        if (uniform(rng, 0, big + small) <= big + small * std::cos(psi)) break;
      }
      const double ring = big + small * std::cos(psi);
      const Vec3d n{std::cos(psi) * std::cos(theta), std::cos(psi) * std::sin(theta),
                    std::sin(psi)};
      if (s.upright) {
        // Arch standing in the xz-plane, feet on the floor.
        return {{ring * std::cos(theta), small * std::sin(psi), ring * std::sin(theta) + small},
                {n[0], n[2], n[1]}};
      }
      return {{ring * std::cos(theta), ring * std::sin(theta), small * std::sin(psi) + small}, n};
    }
  }
  return {};
}

Vec3d sphere_anchor(const ClassShape& s, double scale) {
  return {0, 0, s.dims[0] * scale + s.dims[1]};
}

}  // namespace

const char* primitive_name(Primitive p) {
  switch (p) {
    case Primitive::Plane: return "plane";
    case Primitive::Box: return "box";
    case Primitive::Cylinder: return "cylinder";
    case Primitive::Sphere: return "sphere";
    case Primitive::TorusSegment: return "torus_segment";
  }
  return "?";
}

ClassShape class_shape(int class_id) {
  std::mt19937_64 rng(mix(static_cast<uint64_t>(class_id) * 7919 + 17));
  ClassShape s;
  s.family = static_cast<Primitive>(class_id % 5);
  const int variant = class_id / 5;
  s.upright = (variant % 2) == 1;
  switch (s.family) {
    case Primitive::Plane:
      s.dims = {uniform(rng, 0.18, 0.3), uniform(rng, 0.12, 0.25),
                s.upright ? 0.0 : uniform(rng, 0.1, 0.3)};
      break;
    case Primitive::Box:
      s.dims = {uniform(rng, 0.1, 0.25), uniform(rng, 0.1, 0.25), uniform(rng, 0.08, 0.3)};
      break;
    case Primitive::Cylinder:
      s.dims = {uniform(rng, 0.04, 0.1), uniform(rng, 0.1, 0.35), 0};
      break;
    case Primitive::Sphere:
      s.dims = {uniform(rng, 0.05, 0.12), uniform(rng, 0.0, 0.15), 0};
      break;
    case Primitive::TorusSegment:
      s.dims = {uniform(rng, 0.07, 0.13), uniform(rng, 0.015, 0.035),
                uniform(rng, kPi * 0.8, kPi * (s.upright ? 1.0 : 1.6))};
      break;
  }
  s.color = hsv_to_rgb(class_id * 0.618033988749895, uniform(rng, 0.45, 0.75),
                       uniform(rng, 0.55, 0.9));
  return s;
}

SceneSpec make_scene_spec(const std::vector<int>& classes, double diversity) {
  SceneSpec spec;
  spec.diversity = diversity;
  for (int c : classes) spec.objects.push_back({c, class_shape(c)});
  return spec;
}

GeneratedScene generate_scene_detailed(const SceneSpec& spec, uint64_t seed) {
  if (spec.objects.empty()) throw InvalidArgument("invalid scene spec: no classes listed");
  if (spec.room_size <= 0) throw InvalidArgument("invalid scene spec: room_size must be positive");
  std::mt19937_64 rng(mix(seed));
  const double div = std::max(0.0, spec.diversity);

  // Requested objects first, then unlabeled clutter drawn from random shapes.
  std::vector<ObjectRequest> all = spec.objects;
  std::vector<bool> is_clutter(all.size(), false);
  for (int i = 0; i < spec.clutter_objects; ++i) {
    ClassShape s = class_shape(static_cast<int>(rng() % 1000) + 1000);
    s.dims[0] *= 0.6;
    s.dims[1] *= 0.6;
    if (s.family == Primitive::TorusSegment) s.dims[1] = std::max(s.dims[1], 0.012);
    all.push_back({kClutterLabel, s});
    is_clutter.push_back(true);
  }

  std::vector<double> scales(all.size());
  for (std::size_t i = 0; i < all.size(); ++i) {
    scales[i] = is_clutter[i] ? 1.0 : 1.0 + div * uniform(rng, -0.5, 0.5);
  }

  // Non-overlapping disc placement; shrink everything if the room is too crowded.
  std::vector<std::array<double, 2>> centers(all.size());
  for (int attempt = 0;; ++attempt) {
    bool ok = true;
    for (std::size_t i = 0; i < all.size() && ok; ++i) {
      const double r = footprint(all[i].shape, scales[i]);
      bool placed = false;
      for (int tries = 0; tries < 400 && !placed; ++tries) {
        const double lo = std::min(r, spec.room_size / 2), hi = std::max(spec.room_size - r, lo);
        const double x = uniform(rng, lo, hi), y = uniform(rng, lo, hi);
        placed = true;
        for (std::size_t j = 0; j < i && placed; ++j) {
          const double rj = footprint(all[j].shape, scales[j]);
          if (std::hypot(x - centers[j][0], y - centers[j][1]) < r + rj + 0.01) placed = false;
        }
        if (placed) centers[i] = {x, y};
      }
      ok = placed;
    }
    if (ok) break;
    if (attempt > 50) throw InvalidArgument("invalid scene spec: objects do not fit in the room");
    for (auto& s : scales) s *= 0.92;
  }

  GeneratedScene out;
  PointCloud& pc = out.cloud;
  std::normal_distribution<double> gauss(0.0, 1.0);

  std::size_t object_points = 0;
  for (std::size_t i = 0; i < all.size(); ++i) {
    const auto& req = all[i];
    const auto& shape = req.shape;
    const double scale = scales[i];
    const double area = surface_area(shape, scale);
    const auto count = std::clamp<std::size_t>(static_cast<std::size_t>(area * 9000.0),
                                               spec.min_points_per_object, 1200);
    const double yaw = uniform(rng, 0, 2 * kPi);
    const double cy = std::cos(yaw), sy = std::sin(yaw);
    // Deformation: smooth displacement along the surface normal.
    const double amp = div * 0.12 * footprint(shape, scale);
    const double f1 = uniform(rng, 6, 14), f2 = uniform(rng, 6, 14);
    const double ph1 = uniform(rng, 0, 2 * kPi), ph2 = uniform(rng, 0, 2 * kPi);
    const double hue_shift = div * uniform(rng, -0.06, 0.06);
    const double tint = div * uniform(rng, -0.12, 0.12);
    Vec3f base = req.class_id == kClutterLabel
                     ? hsv_to_rgb(uniform(rng, 0, 1), uniform(rng, 0.0, 0.3), uniform(rng, 0.3, 0.8))
                     : shape.color;
    for (auto& c : base) c = std::clamp(c + static_cast<float>(tint + hue_shift * gauss(rng)), 0.f, 1.f);

    Vec3d anchor_local = shape.family == Primitive::Sphere ? sphere_anchor(shape, scale)
                                                           : Vec3d{0, 0, 0};
    PlacedObject rec{req.class_id, shape.family,
                     {centers[i][0], centers[i][1], anchor_local[2]}, scale, pc.size(), count};

    for (std::size_t k = 0; k < count; ++k) {
      SurfacePoint sp = sample_surface(shape, scale, rng);
      if (amp > 0) {
        const double d = amp * std::sin(f1 * sp.p[0] + ph1) * std::sin(f2 * (sp.p[1] + sp.p[2]) + ph2);
        for (int a = 0; a < 3; ++a) sp.p[a] += d * sp.n[a];
      }
      const double lx = sp.p[0] - anchor_local[0], ly = sp.p[1] - anchor_local[1];
      const Vec3d world{centers[i][0] + cy * lx - sy * ly, centers[i][1] + sy * lx + cy * ly,
                        sp.p[2]};
      Vec3f col;
      for (int a = 0; a < 3; ++a)
        col[a] = std::clamp(static_cast<float>(base[a] + 0.03 * gauss(rng)), 0.f, 1.f);
      pc.push_back({static_cast<float>(world[0]), static_cast<float>(world[1]),
                    static_cast<float>(world[2])},
                   col, req.class_id);
    }
    object_points += count;
    if (!is_clutter[i]) out.objects.push_back(rec);
  }

  // Floor fills the remainder of the point budget.
  const std::size_t floor_points =
      std::max<std::size_t>(spec.min_points > object_points ? spec.min_points - object_points : 0,
                            spec.min_points / 4);
  const Vec3f floor_color = hsv_to_rgb(uniform(rng, 0, 1), uniform(rng, 0.0, 0.15),
                                       uniform(rng, 0.35, 0.6));
  for (std::size_t k = 0; k < floor_points; ++k) {
    Vec3f col;
    for (int a = 0; a < 3; ++a)
      col[a] = std::clamp(static_cast<float>(floor_color[a] + 0.03 * gauss(rng)), 0.f, 1.f);
    pc.push_back({static_cast<float>(uniform(rng, 0, spec.room_size)),
                  static_cast<float>(uniform(rng, 0, spec.room_size)),
                  static_cast<float>(0.003 * gauss(rng))},
                 col, kClutterLabel);
  }
  normalize_coords(pc);
  return out;
}

}  // namespace penet
