#include "crossfuse/encoders.hpp"

#include "crossfuse/error.hpp"
#include "crossfuse/rng.hpp"

#include <cctype>

namespace crossfuse {

namespace {

int conv_out_side(int side) { return (side - 1) / 2 + 1; }

// 3x3 kernel, stride 2, zero padding 1. `in` is channels x (side*side), row-major pixels.
Eigen::MatrixXd im2col(const Eigen::MatrixXd& in, int side) {
  const int out_side = conv_out_side(side);
  const Eigen::Index channels = in.rows();
  Eigen::MatrixXd cols = Eigen::MatrixXd::Zero(channels * 9, out_side * out_side);
  for (Eigen::Index ci = 0; ci < channels; ++ci)
    for (int ky = 0; ky < 3; ++ky)
      for (int kx = 0; kx < 3; ++kx) {
        const Eigen::Index row = ci * 9 + ky * 3 + kx;
        for (int oy = 0; oy < out_side; ++oy) {
          const int y = 2 * oy + ky - 1;
          if (y < 0 || y >= side) continue;
          for (int ox = 0; ox < out_side; ++ox) {
            const int x = 2 * ox + kx - 1;
            if (x < 0 || x >= side) continue;
            cols(row, oy * out_side + ox) = in(ci, y * side + x);
          }
        }
      }
  return cols;
}

Eigen::MatrixXd col2im(const Eigen::MatrixXd& cols, Eigen::Index channels, int side) {
  const int out_side = conv_out_side(side);
  Eigen::MatrixXd in = Eigen::MatrixXd::Zero(channels, side * side);
  for (Eigen::Index ci = 0; ci < channels; ++ci)
    for (int ky = 0; ky < 3; ++ky)
      for (int kx = 0; kx < 3; ++kx) {
        const Eigen::Index row = ci * 9 + ky * 3 + kx;
        for (int oy = 0; oy < out_side; ++oy) {
          const int y = 2 * oy + ky - 1;
          if (y < 0 || y >= side) continue;
          for (int ox = 0; ox < out_side; ++ox) {
            const int x = 2 * ox + kx - 1;
            if (x < 0 || x >= side) continue;
            in(ci, y * side + x) += cols(row, oy * out_side + ox);
          }
        }
      }
  return in;
}

constexpr std::uint32_t kEncoderBlobVersion = 1;

void write_spec(BinaryWriter& w, const EncoderSpec& s) {
  w.u32(kEncoderBlobVersion);
  w.str(s.architecture);
  w.u32(static_cast<std::uint32_t>(s.modality));
  w.u32(static_cast<std::uint32_t>(s.embed_dim));
  w.u32(s.frozen ? 1 : 0);
  w.u64(s.seed);
}

EncoderSpec read_spec(BinaryReader& r, const char* expected_arch) {
  if (r.u32() != kEncoderBlobVersion) throw VersionError("unsupported encoder blob version");
  EncoderSpec s;
  s.architecture = r.str();
  if (s.architecture != expected_arch)
    throw VersionError("encoder architecture '" + s.architecture + "', expected '" +
                       expected_arch + "'");
  s.modality = static_cast<Modality>(r.u32());
  s.embed_dim = static_cast<int>(r.u32());
  s.frozen = r.u32() != 0;
  s.seed = r.u64();
  return s;
}

}  // namespace

VisualEncoder::VisualEncoder(EncoderSpec spec, int input_size)
    : spec_(std::move(spec)), input_size_(input_size) {
  if (input_size < 8) throw ConfigError("visual encoder input size must be >= 8");
  if (spec_.embed_dim < 1) throw ConfigError("embedding width must be >= 1");
  spec_.modality = Modality::visual;
  spec_.architecture = kArchitecture;
  int in_ch = 1;
  for (int i = 0; i < 3; ++i) {
    const int fan_in = in_ch * 9;
    conv_w_[i] = Param(scaled_uniform(kChannels[i], fan_in, fan_in, 6.0,
                                      derive_seed(spec_.seed, {0xc0, static_cast<std::uint64_t>(i)})));
    conv_b_[i] = Param(Eigen::MatrixXd::Zero(kChannels[i], 1));
    in_ch = kChannels[i];
  }
  fc_w_ = Param(scaled_uniform(spec_.embed_dim, in_ch, in_ch, 3.0, derive_seed(spec_.seed, {0xfc})));
  fc_b_ = Param(Eigen::MatrixXd::Zero(spec_.embed_dim, 1));
}

Eigen::VectorXd VisualEncoder::forward(const Grid& gray, Cache* cache) const {
  if (gray.rows() != input_size_ || gray.cols() != input_size_)
    throw ShapeError("visual encoder expects " + std::to_string(input_size_) + "x" +
                     std::to_string(input_size_) + " input, got " + std::to_string(gray.rows()) +
                     "x" + std::to_string(gray.cols()));
  Eigen::MatrixXd act = flatten(gray).transpose();
  int side = input_size_;
  if (cache) cache->side[0] = side;
  for (int i = 0; i < 3; ++i) {
    Eigen::MatrixXd cols = im2col(act, side);
    Eigen::MatrixXd pre = conv_w_[i].value * cols;
    pre.colwise() += conv_b_[i].value.col(0);
    act = pre.cwiseMax(0.0);
    side = conv_out_side(side);
    if (cache) {
      cache->cols[i] = std::move(cols);
      cache->act[i] = act;
      cache->side[i + 1] = side;
    }
  }
  const Eigen::VectorXd pooled = act.rowwise().mean();
  return fc_w_.value * pooled + fc_b_.value.col(0);
}

Grid VisualEncoder::backward(const Cache& cache, const Eigen::VectorXd& grad_out,
                             std::vector<Eigen::MatrixXd>* grads, bool want_input) const {
  const Eigen::MatrixXd& last = cache.act[2];
  const Eigen::VectorXd pooled = last.rowwise().mean();
  if (grads) {
    (*grads)[6] += grad_out * pooled.transpose();
    (*grads)[7].col(0) += grad_out;
  }
  if (!grads && !want_input) return {};
  const Eigen::VectorXd dpooled = fc_w_.value.transpose() * grad_out;
  Eigen::MatrixXd dact = (dpooled / static_cast<double>(last.cols())).replicate(1, last.cols());
  for (int i = 2; i >= 0; --i) {
    const Eigen::MatrixXd dpre = (cache.act[i].array() > 0.0).select(dact, 0.0);
    if (grads) {
      (*grads)[2 * i] += dpre * cache.cols[i].transpose();
      (*grads)[2 * i + 1].col(0) += dpre.rowwise().sum();
    }
    if (i == 0 && !want_input) break;
    const Eigen::MatrixXd dcols = conv_w_[i].value.transpose() * dpre;
    const Eigen::Index in_channels = i == 0 ? 1 : kChannels[i - 1];
    dact = col2im(dcols, in_channels, cache.side[i]);
  }
  if (!want_input) return {};
  return unflatten(dact.row(0).transpose(), input_size_, input_size_);
}

std::vector<NamedParam> VisualEncoder::params() {
  std::vector<NamedParam> out;
  for (int i = 0; i < 3; ++i) {
    out.push_back({"visual.conv" + std::to_string(i) + ".w", &conv_w_[i]});
    out.push_back({"visual.conv" + std::to_string(i) + ".b", &conv_b_[i]});
  }
  out.push_back({"visual.fc.w", &fc_w_});
  out.push_back({"visual.fc.b", &fc_b_});
  return out;
}

void VisualEncoder::save(BinaryWriter& w) const {
  write_spec(w, spec_);
  w.u32(static_cast<std::uint32_t>(input_size_));
  for (int i = 0; i < 3; ++i) {
    w.matrix(conv_w_[i].value);
    w.matrix(conv_b_[i].value);
  }
  w.matrix(fc_w_.value);
  w.matrix(fc_b_.value);
}

VisualEncoder VisualEncoder::load(BinaryReader& r) {
  VisualEncoder enc;
  enc.spec_ = read_spec(r, kArchitecture);
  enc.input_size_ = static_cast<int>(r.u32());
  for (int i = 0; i < 3; ++i) {
    enc.conv_w_[i] = Param(r.matrix());
    enc.conv_b_[i] = Param(r.matrix());
  }
  enc.fc_w_ = Param(r.matrix());
  enc.fc_b_ = Param(r.matrix());
  if (enc.fc_w_.value.rows() != enc.spec_.embed_dim)
    throw VersionError("visual encoder blob width does not match its header");
  return enc;
}

TextEncoder::TextEncoder(EncoderSpec spec) : spec_(std::move(spec)) {
  if (spec_.embed_dim < 1) throw ConfigError("embedding width must be >= 1");
  spec_.modality = Modality::text;
  spec_.architecture = kArchitecture;
  w_ = Param(scaled_uniform(spec_.embed_dim, kBuckets, 1.0, 3.0, derive_seed(spec_.seed, {0x7e}))); 
  b_ = Param(Eigen::MatrixXd::Zero(spec_.embed_dim, 1));
}

std::vector<std::string> TextEncoder::tokenize(const std::string& caption) {
  std::vector<std::string> tokens;
  std::string cur;
  for (char ch : caption) {
    const auto c = static_cast<unsigned char>(ch);
    if (std::isalnum(c)) {
      cur.push_back(static_cast<char>(std::tolower(c)));
    } else if (!cur.empty()) {
      tokens.push_back(std::move(cur));
      cur.clear();
    }
  }
  if (!cur.empty()) tokens.push_back(std::move(cur));
  return tokens;
}

Eigen::VectorXd TextEncoder::bag(const std::string& caption) {
  const auto tokens = tokenize(caption);
  if (tokens.empty()) throw DataError("text encoder: caption has no tokens");
  Eigen::VectorXd b = Eigen::VectorXd::Zero(kBuckets);
  for (const auto& t : tokens) b(static_cast<Eigen::Index>(fnv1a(t) % kBuckets)) += 1.0;
  return b / static_cast<double>(tokens.size());
}

Eigen::VectorXd TextEncoder::forward_bag(const Eigen::VectorXd& bag) const {
  return w_.value * bag + b_.value.col(0);
}

Eigen::VectorXd TextEncoder::forward(const std::string& caption) const {
  return forward_bag(bag(caption));
}

void TextEncoder::backward(const Eigen::VectorXd& bag, const Eigen::VectorXd& grad_out,
                           std::vector<Eigen::MatrixXd>& grads) const {
  grads[0] += grad_out * bag.transpose();
  grads[1].col(0) += grad_out;
}

std::vector<NamedParam> TextEncoder::params() { return {{"text.w", &w_}, {"text.b", &b_}}; }

void TextEncoder::save(BinaryWriter& w) const {
  write_spec(w, spec_);
  w.matrix(w_.value);
  w.matrix(b_.value);
}

TextEncoder TextEncoder::load(BinaryReader& r) {
  TextEncoder enc;
  enc.spec_ = read_spec(r, kArchitecture);
  enc.w_ = Param(r.matrix());
  enc.b_ = Param(r.matrix());
  if (enc.w_.value.rows() != enc.spec_.embed_dim || enc.w_.value.cols() != kBuckets)
    throw VersionError("text encoder blob shape does not match its header");
  return enc;
}

const Eigen::VectorXd& EmbeddingTriple::operator[](Modality m) const {
  switch (m) {
    case Modality::visual: return visual;
    case Modality::text: return text;
    case Modality::frequency: return frequency;
  }
  return visual;
}

Grid prepare_image(const Image& img, int size) {
  if (img.empty()) throw ShapeError("empty image");
  return resize_bilinear(img.gray(), size, size);
}

EmbeddingTriple embed_all(const SampleRecord& record, const VisualEncoder& visual,
                          const TextEncoder& text, const FreqFeatureParams& freq) {
  if (visual.spec().embed_dim != text.spec().embed_dim || text.spec().embed_dim != freq.embed_dim())
    throw ShapeError("encoders disagree on embedding width");
  const Grid gray = prepare_image(record.image, visual.input_size());
  return {visual.forward(gray), text.forward(record.caption), freq_embed(gray, freq)};
}

std::vector<EmbeddingTriple> embed_all(std::span<const SampleRecord* const> records,
                                       const VisualEncoder& visual, const TextEncoder& text,
                                       const FreqFeatureParams& freq) {
  std::vector<EmbeddingTriple> out;
  out.reserve(records.size());
  for (const auto* r : records) out.push_back(embed_all(*r, visual, text, freq));
  return out;
}

}  // namespace crossfuse
