#include "refseg/data/scene.hpp"

#include <algorithm>
#include <sstream>
#include <stdexcept>

namespace refseg::data {

const char* to_string(Kind k) {
  switch (k) {
    case Kind::circle: return "circle";
    case Kind::square: return "square";
    case Kind::triangle: return "triangle";
  }
  throw std::invalid_argument("to_string: bad Kind");
}

const char* to_string(Color c) {
  switch (c) {
    case Color::red: return "red";
    case Color::green: return "green";
    case Color::blue: return "blue";
    case Color::yellow: return "yellow";
    case Color::purple: return "purple";
    case Color::orange: return "orange";
  }
  throw std::invalid_argument("to_string: bad Color");
}

const char* to_string(Relation r) {
  switch (r) {
    case Relation::left_of: return "left of";
    case Relation::right_of: return "right of";
    case Relation::above: return "above";
    case Relation::below: return "below";
  }
  throw std::invalid_argument("to_string: bad Relation");
}

Kind kind_from_string(std::string_view s) {
  for (std::size_t k = 0; k < kKindCount; ++k)
    if (s == to_string(Kind(k))) return Kind(k);
  throw std::invalid_argument("kind_from_string: unknown kind '" +
                              std::string(s) + "'");
}

Color color_from_string(std::string_view s) {
  for (std::size_t c = 0; c < kColorCount; ++c)
    if (s == to_string(Color(c))) return Color(c);
  throw std::invalid_argument("color_from_string: unknown color '" +
                              std::string(s) + "'");
}

std::array<std::uint8_t, 3> palette(Color c) {
  switch (c) {
    case Color::red: return {220, 50, 47};
    case Color::green: return {64, 190, 80};
    case Color::blue: return {58, 96, 220};
    case Color::yellow: return {235, 210, 60};
    case Color::purple: return {160, 70, 200};
    case Color::orange: return {240, 140, 40};
  }
  throw std::invalid_argument("palette: bad Color");
}

Box bounding_box(const Shape& s) {
  switch (s.kind) {
    case Kind::circle:
      return {s.cx - s.size, s.cy - s.size, s.cx + s.size, s.cy + s.size};
    case Kind::square: {
      const int x0 = s.cx - s.size / 2;
      const int y0 = s.cy - s.size / 2;
      return {x0, y0, x0 + s.size - 1, y0 + s.size - 1};
    }
    case Kind::triangle:
      return {s.cx - s.size, s.cy - s.size, s.cx + s.size, s.cy + s.size};
  }
  throw std::invalid_argument("bounding_box: bad Kind");
}

bool inside_frame(const Box& b, int frame) {
  return b.x0 >= 0 && b.y0 >= 0 && b.x1 < frame && b.y1 < frame;
}

bool boxes_gap_at_least(const Box& a, const Box& b, int gap) {
  const int gx = std::max(b.x0 - a.x1, a.x0 - b.x1) - 1;
  const int gy = std::max(b.y0 - a.y1, a.y0 - b.y1) - 1;
  return gx >= gap || gy >= gap;
}

namespace {

// twice the signed area of (a, b, p); >= 0 when p lies left of or on a->b
long long edge_side(int ax, int ay, int bx, int by, int px, int py) {
  return (long long)(bx - ax) * (py - ay) - (long long)(by - ay) * (px - ax);
}

bool shape_contains(const Shape& s, int x, int y) {
  switch (s.kind) {
    case Kind::circle: {
      const long long dx = x - s.cx, dy = y - s.cy;
      return dx * dx + dy * dy <= (long long)s.size * s.size;
    }
    case Kind::square: {
      const int x0 = s.cx - s.size / 2;
      const int y0 = s.cy - s.size / 2;
      return x >= x0 && x < x0 + s.size && y >= y0 && y < y0 + s.size;
    }
    case Kind::triangle: {
      // counterclockwise in screen coordinates (y grows downward)
      const int ax = s.cx, ay = s.cy - s.size;          // apex
      const int bx = s.cx - s.size, by = s.cy + s.size; // bottom left
      const int cx = s.cx + s.size, cy = s.cy + s.size; // bottom right
      return edge_side(ax, ay, bx, by, x, y) <= 0 &&
             edge_side(bx, by, cx, cy, x, y) <= 0 &&
             edge_side(cx, cy, ax, ay, x, y) <= 0;
    }
  }
  throw std::invalid_argument("shape_contains: bad Kind");
}

}  // namespace

std::vector<std::uint8_t> rasterize(const Shape& s, int frame) {
  if (frame <= 0) throw std::invalid_argument("rasterize: frame must be positive");
  if (s.size <= 0) throw std::invalid_argument("rasterize: size must be positive");
  std::vector<std::uint8_t> mask(std::size_t(frame) * frame, 0);
  const Box b = bounding_box(s);
  const int x0 = std::max(b.x0, 0), x1 = std::min(b.x1, frame - 1);
  const int y0 = std::max(b.y0, 0), y1 = std::min(b.y1, frame - 1);
  for (int y = y0; y <= y1; ++y)
    for (int x = x0; x <= x1; ++x)
      if (shape_contains(s, x, y)) mask[std::size_t(y) * frame + x] = 1;
  return mask;
}

std::vector<std::uint8_t> render(const std::vector<Shape>& shapes, int frame) {
  std::vector<std::uint8_t> rgb(std::size_t(frame) * frame * 3);
  for (std::size_t i = 0; i < rgb.size(); i += 3) {
    rgb[i] = kBackground[0];
    rgb[i + 1] = kBackground[1];
    rgb[i + 2] = kBackground[2];
  }
  for (const Shape& s : shapes) {
    const auto mask = rasterize(s, frame);
    const auto fill = palette(s.color);
    for (std::size_t p = 0; p < mask.size(); ++p)
      if (mask[p]) {
        rgb[p * 3] = fill[0];
        rgb[p * 3 + 1] = fill[1];
        rgb[p * 3 + 2] = fill[2];
      }
  }
  return rgb;
}

bool relation_holds(Relation rel, const Shape& a, const Shape& b) {
  const int dx = a.cx - b.cx;
  const int dy = a.cy - b.cy;
  switch (rel) {
    case Relation::left_of: return -dx >= kRelationMargin && -dx > std::abs(dy);
    case Relation::right_of: return dx >= kRelationMargin && dx > std::abs(dy);
    case Relation::above: return -dy >= kRelationMargin && -dy > std::abs(dx);
    case Relation::below: return dy >= kRelationMargin && dy > std::abs(dx);
  }
  throw std::invalid_argument("relation_holds: bad Relation");
}

std::string ExpressionSpec::words() const {
  std::string out = "the ";
  if (is_attribute()) {
    out += to_string(*target_color);
    out += ' ';
    out += to_string(target_kind);
  } else {
    out += to_string(target_kind);
    out += ' ';
    out += to_string(*relation);
    out += " the ";
    out += to_string(landmark_color);
    out += ' ';
    out += to_string(landmark_kind);
  }
  return out;
}

ExpressionSpec parse_expression(std::string_view text) {
  std::istringstream in{std::string(text)};
  std::vector<std::string> w;
  std::string tok;
  while (in >> tok) w.push_back(tok);
  ExpressionSpec e;
  const auto fail = [&] {
    throw std::invalid_argument("parse_expression: '" + std::string(text) +
                                "' matches no template");
  };
  if (w.empty() || w[0] != "the") fail();
  if (w.size() == 3) {  // "the {color} {kind}"
    e.target_color = color_from_string(w[1]);
    e.target_kind = kind_from_string(w[2]);
    return e;
  }
  // "the {kind} {rel...} the {color} {kind}"
  std::size_t after_rel;
  if (w.size() == 6) {
    if (w[2] == "above") e.relation = Relation::above;
    else if (w[2] == "below") e.relation = Relation::below;
    else fail();
    after_rel = 3;
  } else if (w.size() == 7 && w[3] == "of") {
    if (w[2] == "left") e.relation = Relation::left_of;
    else if (w[2] == "right") e.relation = Relation::right_of;
    else fail();
    after_rel = 4;
  } else {
    fail();
    return e;  // unreachable
  }
  e.target_kind = kind_from_string(w[1]);
  if (w[after_rel] != "the") fail();
  e.landmark_color = color_from_string(w[after_rel + 1]);
  e.landmark_kind = kind_from_string(w[after_rel + 2]);
  return e;
}

std::vector<std::size_t> resolve(const Scene& scene, const ExpressionSpec& e) {
  std::vector<std::size_t> out;
  if (e.is_attribute()) {
    for (std::size_t i = 0; i < scene.shapes.size(); ++i)
      if (scene.shapes[i].kind == e.target_kind &&
          scene.shapes[i].color == *e.target_color)
        out.push_back(i);
    return out;
  }
  if (!e.relation.has_value())
    throw std::invalid_argument("resolve: expression has neither color nor relation");
  std::vector<std::size_t> landmarks;
  for (std::size_t i = 0; i < scene.shapes.size(); ++i)
    if (scene.shapes[i].kind == e.landmark_kind &&
        scene.shapes[i].color == e.landmark_color)
      landmarks.push_back(i);
  if (landmarks.size() != 1) return out;  // landmark missing or ambiguous
  const Shape& lm = scene.shapes[landmarks[0]];
  for (std::size_t i = 0; i < scene.shapes.size(); ++i)
    if (scene.shapes[i].kind == e.target_kind &&
        relation_holds(*e.relation, scene.shapes[i], lm))
      out.push_back(i);
  return out;
}

}  // namespace refseg::data
