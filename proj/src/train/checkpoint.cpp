// Binary run checkpoints.
//
// Layout (little-endian):
//   magic "RSEGCKPT" | version u32 | config hash u64 | config text (u64 len +
//   bytes) | epoch u64 | tensor count u64 | per tensor: name (u64 len +
//   bytes), rows u64, cols u64, trainable u8, values f32[rows*cols] |
//   optimizer step count u64 | per tensor: moment1 f32[], moment2 f32[] |
//   stream count u64 | per stream in name order: name, state u64.
//
// Loading rebuilds the run from the embedded config text, so a checkpoint is
// self contained; parameter values, Adam moments, rng stream states, and the
// epoch are then restored on top of the freshly initialised state.

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "refseg/train/trainer.hpp"

namespace refseg::train {
namespace {

static_assert(std::endian::native == std::endian::little,
              "checkpoint format assumes a little-endian host");

constexpr char kMagic[8] = {'R', 'S', 'E', 'G', 'C', 'K', 'P', 'T'};
constexpr std::uint32_t kVersion = 1;

void write_bytes(std::ostream& out, const void* p, std::size_t n) {
  out.write(static_cast<const char*>(p), std::streamsize(n));
}

void write_u32(std::ostream& out, std::uint32_t v) { write_bytes(out, &v, 4); }
void write_u64(std::ostream& out, std::uint64_t v) { write_bytes(out, &v, 8); }
void write_u8(std::ostream& out, std::uint8_t v) { write_bytes(out, &v, 1); }

void write_string(std::ostream& out, const std::string& s) {
  write_u64(out, s.size());
  write_bytes(out, s.data(), s.size());
}

void write_floats(std::ostream& out, const std::vector<float>& v) {
  write_bytes(out, v.data(), v.size() * sizeof(float));
}

void read_bytes(std::istream& in, void* p, std::size_t n) {
  in.read(static_cast<char*>(p), std::streamsize(n));
  if (static_cast<std::size_t>(in.gcount()) != n)
    throw std::runtime_error("checkpoint: truncated file");
}

std::uint32_t read_u32(std::istream& in) {
  std::uint32_t v;
  read_bytes(in, &v, 4);
  return v;
}

std::uint64_t read_u64(std::istream& in) {
  std::uint64_t v;
  read_bytes(in, &v, 8);
  return v;
}

std::uint8_t read_u8(std::istream& in) {
  std::uint8_t v;
  read_bytes(in, &v, 1);
  return v;
}

std::string read_string(std::istream& in) {
  const std::uint64_t n = read_u64(in);
  if (n > (1ull << 20))
    throw std::runtime_error("checkpoint: string length out of range");
  std::string s(static_cast<std::size_t>(n), '\0');
  read_bytes(in, s.data(), s.size());
  return s;
}

void read_floats(std::istream& in, std::vector<float>& v) {
  read_bytes(in, v.data(), v.size() * sizeof(float));
}

}  // namespace

void save_checkpoint(const std::filesystem::path& path, const RunState& st) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out)
    throw std::runtime_error("checkpoint: cannot open for writing: " +
                             path.string());
  if (st.optimizer->slot_count() != st.params.count())
    throw std::runtime_error("checkpoint: optimizer slots do not match parameters");

  write_bytes(out, kMagic, sizeof(kMagic));
  write_u32(out, kVersion);
  write_u64(out, config_hash(st.config));
  write_string(out, serialize_run_config(st.config));
  write_u64(out, st.epoch);

  write_u64(out, st.params.count());
  for (std::size_t i = 0; i < st.params.count(); ++i) {
    const auto& p = st.params.at(i);
    write_string(out, p.name);
    write_u64(out, p.rows);
    write_u64(out, p.cols);
    write_u8(out, p.trainable ? 1 : 0);
    write_floats(out, p.value);
  }

  write_u64(out, st.optimizer->step_count());
  for (std::size_t i = 0; i < st.params.count(); ++i) {
    write_floats(out, st.optimizer->moment1(i));
    write_floats(out, st.optimizer->moment2(i));
  }

  const auto& streams = st.rng.streams();
  write_u64(out, streams.size());
  for (const auto& [name, rng] : streams) {
    write_string(out, name);
    write_u64(out, rng.state());
  }

  out.flush();
  if (!out)
    throw std::runtime_error("checkpoint: write failed: " + path.string());
}

std::unique_ptr<RunState> load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in)
    throw std::runtime_error("checkpoint: cannot open: " + path.string());

  char magic[8];
  read_bytes(in, magic, sizeof(magic));
  if (std::memcmp(magic, kMagic, sizeof(kMagic)) != 0)
    throw std::runtime_error("checkpoint: bad magic");
  const std::uint32_t version = read_u32(in);
  if (version != kVersion)
    throw std::runtime_error("checkpoint: unsupported version " +
                             std::to_string(version));
  const std::uint64_t saved_hash = read_u64(in);
  const std::string config_text = read_string(in);
  const RunConfig cfg = parse_run_config_text(config_text);
  if (config_hash(cfg) != saved_hash)
    throw std::runtime_error("checkpoint: config hash mismatch");
  const std::uint64_t epoch = read_u64(in);

  // Fresh state from the embedded config; the "init" stream draws below are
  // overwritten by the restored values and stream states.
  auto st = init_run(cfg);
  st->epoch = epoch;

  const std::uint64_t tensor_count = read_u64(in);
  if (tensor_count != st->params.count())
    throw std::runtime_error("checkpoint: tensor count mismatch");
  for (std::size_t i = 0; i < st->params.count(); ++i) {
    auto& p = st->params.at(i);
    const std::string name = read_string(in);
    const std::uint64_t rows = read_u64(in);
    const std::uint64_t cols = read_u64(in);
    const bool trainable = read_u8(in) != 0;
    if (name != p.name || rows != p.rows || cols != p.cols ||
        trainable != p.trainable)
      throw std::runtime_error("checkpoint: tensor table mismatch at '" +
                               p.name + "'");
    read_floats(in, p.value);
  }

  st->optimizer->set_step_count(read_u64(in));
  for (std::size_t i = 0; i < st->params.count(); ++i) {
    read_floats(in, st->optimizer->moment1(i));
    read_floats(in, st->optimizer->moment2(i));
  }

  const std::uint64_t stream_count = read_u64(in);
  for (std::uint64_t i = 0; i < stream_count; ++i) {
    const std::string name = read_string(in);
    st->rng.restore_stream(name, read_u64(in));
  }

  char extra;
  in.read(&extra, 1);
  if (!in.eof()) throw std::runtime_error("checkpoint: trailing bytes");
  return st;
}

}  // namespace refseg::train
