#pragma once

#include <cstdint>
#include <vector>

#include "penet/point_cloud.hpp"

namespace penet {

enum class Primitive { Plane, Box, Cylinder, Sphere, TorusSegment };

const char* primitive_name(Primitive p);

/// Parametric description of one semantic class.
///
/// `dims` is family specific (meters):
///   Plane        {width, depth_or_height, elevation}
///   Box          {width, depth, height}
///   Cylinder     {radius, height, unused}
///   Sphere       {radius, lift above floor, unused}
///   TorusSegment {major radius, minor radius, angular span (rad)}
/// `upright` selects the vertical orientation for planes and tori.
struct ClassShape {
  Primitive family = Primitive::Box;
  std::array<double, 3> dims{0.2, 0.2, 0.2};
  Vec3f color{0.5f, 0.5f, 0.5f};
  bool upright = false;
};

/// Procedural class library: shape family cycles with the id, sizes and
/// colors come from a fixed per-id hash so every manifest agrees on them.
ClassShape class_shape(int class_id);

struct ObjectRequest {
  int class_id = 0;
  ClassShape shape;
};

struct SceneSpec {
  std::vector<ObjectRequest> objects;
  /// Scales instance size jitter, surface deformation and color jitter.
  /// Zero yields exact primitives.
  double diversity = 0.3;
  double room_size = 1.0;
  std::size_t min_points = 4096;
  std::size_t min_points_per_object = 200;
  int clutter_objects = 2;
};

/// One object per listed class, shapes from the class library.
SceneSpec make_scene_spec(const std::vector<int>& classes, double diversity);

/// Placement record of a generated object, in scene coordinates.
struct PlacedObject {
  int class_id;
  Primitive family;
  std::array<double, 3> anchor;  // sphere center, else base center
  double scale;
  std::size_t first_point;
  std::size_t num_points;
};

struct GeneratedScene {
  PointCloud cloud;
  std::vector<PlacedObject> objects;
};

/// Throws InvalidArgument on an empty object list.
GeneratedScene generate_scene_detailed(const SceneSpec& spec, uint64_t seed);

inline PointCloud generate_scene(const SceneSpec& spec, uint64_t seed) {
  return generate_scene_detailed(spec, seed).cloud;
}

}  // namespace penet
