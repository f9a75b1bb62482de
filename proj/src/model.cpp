#include "milkit/model.hpp"

#include <cmath>
#include <cstring>
#include <fstream>
#include <sstream>

#include "milkit/attnmil.hpp"
#include "milkit/error.hpp"
#include "milkit/rng.hpp"
#include "milkit/transmil.hpp"

namespace milkit::model {

ag::Var ParamStore::add(const std::string& name, Matrix init) {
  if (contains(name)) throw MilError(ErrorCode::kInvalidArgument, "duplicate parameter " + name);
  ag::Var v = ag::parameter(std::move(init));
  items_.emplace_back(name, v);
  return v;
}

ag::Var ParamStore::get(const std::string& name) const {
  for (const auto& [n, v] : items_) {
    if (n == name) return v;
  }
  throw MilError(ErrorCode::kInvalidArgument, "unknown parameter " + name);
}

bool ParamStore::contains(const std::string& name) const {
  for (const auto& item : items_) {
    if (item.first == name) return true;
  }
  return false;
}

std::size_t ParamStore::scalar_count() const {
  std::size_t n = 0;
  for (const auto& item : items_) n += static_cast<std::size_t>(item.second->value.size());
  return n;
}

void ParamStore::zero_grad() {
  for (auto& item : items_) item.second->zero_grad();
}

std::vector<Matrix> ParamStore::snapshot() const {
  std::vector<Matrix> out;
  out.reserve(items_.size());
  for (const auto& item : items_) out.push_back(item.second->value);
  return out;
}

void ParamStore::restore(const std::vector<Matrix>& values) {
  if (values.size() != items_.size()) {
    throw MilError(ErrorCode::kShapeMismatch, "snapshot has wrong parameter count");
  }
  for (std::size_t i = 0; i < values.size(); ++i) {
    Matrix& dst = items_[i].second->value;
    if (dst.rows() != values[i].rows() || dst.cols() != values[i].cols()) {
      throw MilError(ErrorCode::kShapeMismatch, "snapshot shape for " + items_[i].first);
    }
    dst = values[i];
  }
}

Matrix xavier_normal(int rows, int cols, Rng& rng) {
  const double sd = std::sqrt(2.0 / (rows + cols));
  Matrix m(rows, cols);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = sd * rng.normal();
  return m;
}

Matrix uniform_matrix(int rows, int cols, double bound, Rng& rng) {
  Matrix m(rows, cols);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = bound * (2.0 * rng.uniform() - 1.0);
  return m;
}

int argmax(const std::vector<double>& values) {
  if (values.empty()) throw MilError(ErrorCode::kInvalidArgument, "argmax of empty vector");
  int best = 0;
  for (int i = 1; i < static_cast<int>(values.size()); ++i) {
    if (values[static_cast<std::size_t>(i)] > values[static_cast<std::size_t>(best)]) best = i;
  }
  return best;
}

std::unique_ptr<MilModel> make_model(const std::string& family, const nlohmann::json& config,
                                     std::uint64_t init_seed) {
  if (family == "clam_sb" || family == "clam_mb") {
    nlohmann::json c = config;
    c["branch_mode"] = family == "clam_mb" ? "MB" : "SB";
    return std::make_unique<attnmil::ClamModel>(attnmil::clam_config_from_json(c), init_seed);
  }
  if (family == "transmil") {
    return std::make_unique<transmil::TransMilModel>(transmil::transmil_config_from_json(config),
                                                     init_seed);
  }
  throw MilError(ErrorCode::kInvalidArgument, "unknown model family '" + family + "'");
}

namespace {

constexpr char kMagic[7] = {'M', 'I', 'L', 'C', 'K', '1', '\0'};
constexpr std::uint32_t kVersion = 1;

template <typename T>
void put(std::ostream& os, T v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T take(std::istream& is, const std::string& what) {
  T v{};
  if (!is.read(reinterpret_cast<char*>(&v), sizeof(T))) {
    throw MilError(ErrorCode::kBadCheckpoint, "truncated " + what);
  }
  return v;
}

}  // namespace

void save_checkpoint(const MilModel& model, const std::filesystem::path& path,
                     const nlohmann::json& metadata) {
  nlohmann::json header;
  header["family"] = model.family();
  header["config"] = model.config_json();
  header["metadata"] = metadata;
  header["tensors"] = nlohmann::json::array();
  for (const auto& [name, v] : model.params().items()) {
    header["tensors"].push_back({{"name", name}, {"rows", v->value.rows()}, {"cols", v->value.cols()}});
  }
  const std::string text = header.dump();

  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  const std::filesystem::path tmp = path.string() + ".tmp";
  {
    std::ofstream os(tmp, std::ios::binary | std::ios::trunc);
    if (!os) throw MilError(ErrorCode::kIoError, "cannot write " + tmp.string());
    os.write(kMagic, sizeof(kMagic));
    put<std::uint32_t>(os, kVersion);
    put<std::uint64_t>(os, text.size());
    os.write(text.data(), static_cast<std::streamsize>(text.size()));
    for (const auto& item : model.params().items()) {
      const Matrix& m = item.second->value;
      os.write(reinterpret_cast<const char*>(m.data()),
               static_cast<std::streamsize>(m.size() * sizeof(double)));
    }
    if (!os) throw MilError(ErrorCode::kIoError, "write failed for " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

LoadedCheckpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw MilError(ErrorCode::kIoError, "cannot open " + path.string());
  char magic[sizeof(kMagic)];
  if (!is.read(magic, sizeof(magic)) || std::memcmp(magic, kMagic, sizeof(kMagic)) != 0) {
    throw MilError(ErrorCode::kBadCheckpoint, path.string() + " is not a checkpoint");
  }
  const auto version = take<std::uint32_t>(is, "version");
  if (version != kVersion) {
    throw MilError(ErrorCode::kBadCheckpoint, "unsupported checkpoint version " +
                                                  std::to_string(version));
  }
  const auto len = take<std::uint64_t>(is, "header length");
  if (len > (1ULL << 30)) throw MilError(ErrorCode::kBadCheckpoint, "header too large");
  std::string text(len, '\0');
  if (!is.read(text.data(), static_cast<std::streamsize>(len))) {
    throw MilError(ErrorCode::kBadCheckpoint, "truncated header");
  }
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw MilError(ErrorCode::kBadCheckpoint, std::string("header: ") + e.what());
  }

  LoadedCheckpoint out;
  out.model = make_model(header.at("family").get<std::string>(), header.at("config"), 0);
  out.metadata = header.value("metadata", nlohmann::json::object());
  const auto& items = out.model->params().items();
  const auto& tensors = header.at("tensors");
  if (tensors.size() != items.size()) {
    throw MilError(ErrorCode::kBadCheckpoint, "tensor count does not match architecture");
  }
  for (std::size_t i = 0; i < items.size(); ++i) {
    const auto& t = tensors[i];
    Matrix& dst = items[i].second->value;
    if (t.at("name").get<std::string>() != items[i].first ||
        t.at("rows").get<Eigen::Index>() != dst.rows() ||
        t.at("cols").get<Eigen::Index>() != dst.cols()) {
      throw MilError(ErrorCode::kBadCheckpoint, "tensor " + items[i].first + " mismatch");
    }
    if (!is.read(reinterpret_cast<char*>(dst.data()),
                 static_cast<std::streamsize>(dst.size() * sizeof(double)))) {
      throw MilError(ErrorCode::kBadCheckpoint, "truncated tensor data");
    }
  }
  return out;
}

}  // namespace milkit::model
