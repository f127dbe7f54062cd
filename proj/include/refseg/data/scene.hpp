#pragma once
// Scene geometry: colored shapes on a square frame, exact (non-antialiased)
// rasterization, spatial relations, and the expression resolver that checks
// which shapes a templated referring expression describes.

#include <array>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

namespace refseg::data {

enum class Kind : std::uint8_t { circle, square, triangle };
enum class Color : std::uint8_t { red, green, blue, yellow, purple, orange };
enum class Relation : std::uint8_t { left_of, right_of, above, below };

inline constexpr std::size_t kKindCount = 3;
inline constexpr std::size_t kColorCount = 6;

const char* to_string(Kind k);
const char* to_string(Color c);
const char* to_string(Relation r);  // as it appears in expressions
Kind kind_from_string(std::string_view s);
Color color_from_string(std::string_view s);

// RGB fill used when rendering; distinct per color.
std::array<std::uint8_t, 3> palette(Color c);
inline constexpr std::array<std::uint8_t, 3> kBackground{30, 30, 30};

// `size` is the circle radius, the square side, or the triangle half-width
// (an up-pointing isosceles triangle spanning [cy-size, cy+size] vertically).
// (cx, cy) is the shape center; squares start at (cx - size/2, cy - size/2).
struct Shape {
  Kind kind = Kind::circle;
  Color color = Color::red;
  int cx = 0;
  int cy = 0;
  int size = 0;
};

struct Box {  // inclusive pixel bounds
  int x0 = 0, y0 = 0, x1 = -1, y1 = -1;
};

Box bounding_box(const Shape& s);
bool inside_frame(const Box& b, int frame);
// true when the boxes are separated by at least `gap` empty pixel columns
// or rows along some axis
bool boxes_gap_at_least(const Box& a, const Box& b, int gap);

// Exact binary raster of one shape on a frame x frame grid, row-major.
//   circle:   pixel (x, y) set iff (x-cx)^2 + (y-cy)^2 <= size^2
//   square:   the size x size pixel block at (cx - size/2, cy - size/2)
//   triangle: pixel centers inside / on the edges of the vertex triangle
//             (cx, cy-size), (cx-size, cy+size), (cx+size, cy+size)
std::vector<std::uint8_t> rasterize(const Shape& s, int frame);

// Paints shapes over the background; shapes are assumed disjoint.
// Output is row-major interleaved RGB, 3 * frame * frame bytes.
std::vector<std::uint8_t> render(const std::vector<Shape>& shapes, int frame);

// `a REL b` holds when the displacement along the relation's axis is at
// least kRelationMargin pixels and strictly dominates the cross-axis
// displacement ("above" means smaller y).  At most one relation holds for
// any ordered pair, and none relates a shape to itself.
inline constexpr int kRelationMargin = 6;
bool relation_holds(Relation rel, const Shape& a, const Shape& b);

struct Scene {
  std::vector<Shape> shapes;
  std::uint64_t seed = 0;
};

// Parsed form of the two expression template families.
struct ExpressionSpec {
  Kind target_kind = Kind::circle;
  std::optional<Color> target_color;    // attribute family: "the {color} {kind}"
  std::optional<Relation> relation;     // relation family:
  Kind landmark_kind = Kind::circle;    //   "the {kind} {rel} the {color} {kind}"
  Color landmark_color = Color::red;

  bool is_attribute() const { return target_color.has_value(); }
  std::string words() const;  // the expression text
};

// Indices of every shape the expression describes (empty when the relation
// family's landmark is itself absent or ambiguous).  A well-formed referring
// sample has exactly one.
std::vector<std::size_t> resolve(const Scene& scene, const ExpressionSpec& e);

// Inverse of ExpressionSpec::words(); throws std::invalid_argument when the
// text matches neither template.
ExpressionSpec parse_expression(std::string_view text);

}  // namespace refseg::data
