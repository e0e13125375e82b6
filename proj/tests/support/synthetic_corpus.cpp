#include "support/synthetic_corpus.hpp"

#include <sstream>

#include <Eigen/Dense>

#include "layerprobe/corpus_io.hpp"
#include "layerprobe/dsp.hpp"
#include "layerprobe/rng.hpp"
#include "layerprobe/textio.hpp"
#include "support/signals.hpp"

namespace layerprobe::testing {

namespace fs = std::filesystem;

namespace {

std::string id_of(std::size_t i) {
  std::string s = std::to_string(i);
  return "utt" + std::string(3 - std::min<std::size_t>(3, s.size()), '0') + s;
}

std::string join(const std::vector<int>& seq) {
  std::string out;
  for (int p : seq) out += " " + kSyntheticPhones[static_cast<std::size_t>(p)];
  return out;
}

constexpr const char* kConfig = R"(seed = 7
out_dir = "out"

[corpus]
manifest = "manifest.jsonl"
inventory = "phones.txt"
alignments = "alignments.tsv"
labels = "labels.jsonl"

[[tasks]]
id = "vc"
classes = ["cry", "fuss", "babble"]

[[pool.windows]]
task = "vc"
tracks = "tracks.tsv"

[cca_phoneme]
per_phone_cap = 600

[cca_paraling]
task = "vc"
per_class = 12

[probe]
tasks = ["vc"]
lr = 0.5
hidden = 64
dev_groups = ["f4"]
test_groups = ["f5"]

[score]
reference = "ref.txt"

[[score.system]]
name = "A"
transcript = "hyp_a.txt"

[[score.system]]
name = "B"
transcript = "hyp_b.txt"
)";

}  // namespace

void write_synthetic_corpus(const fs::path& dir, const SyntheticSpec& spec) {
  fs::create_directories(dir / "repr");
  if (spec.audio) fs::create_directories(dir / "audio");
  Rng rng(spec.seed);
  const std::size_t n_phones = kSyntheticPhones.size();
  const Eigen::Index dim = spec.dim;
  Eigen::MatrixXd phone_proto(static_cast<Eigen::Index>(n_phones), dim);
  Eigen::MatrixXd class_proto(3, dim);
  Eigen::VectorXd pitch_dir(dim);
  for (Eigen::Index i = 0; i < phone_proto.size(); ++i) phone_proto.data()[i] = 1.5 * rng.normal();
  for (Eigen::Index i = 0; i < class_proto.size(); ++i) class_proto.data()[i] = rng.normal();
  for (Eigen::Index i = 0; i < dim; ++i) pitch_dir[i] = rng.normal();
  const double base_f0[3] = {450.0, 350.0, 250.0};

  std::string phones;
  for (const auto& p : kSyntheticPhones) phones += p + "\n";
  text::write_file(dir / "phones.txt", phones);

  std::vector<UtteranceManifest> manifest;
  std::vector<AlignmentEntry> alignments;
  std::vector<LabelRecord> labels;
  std::ostringstream tracks, ref, hyp_a, hyp_b;
  for (std::size_t u = 0; u < spec.n_utterances; ++u) {
    const std::string id = id_of(u);
    const std::size_t cls = (u / spec.n_groups) % 3;
    const double f0 = base_f0[cls] + rng.uniform(-20.0, 20.0);
    const double dur = spec.duration_s;

    // Phone segmentation.
    std::vector<AlignmentEntry> segs;
    std::vector<int> seq;
    for (double t = 0.05; t < dur - 0.25;) {
      const double d = rng.uniform(0.06, 0.2);
      const int p = static_cast<int>(rng.uniform_index(n_phones));
      segs.push_back({id, kSyntheticPhones[static_cast<std::size_t>(p)], t, t + d});
      seq.push_back(p);
      t += d;
    }

    ReprTensor tensor(spec.n_layers, static_cast<std::uint32_t>((dur - kDefaultFrameOffsetS) / kDefaultFrameHopS) + 1,
                      spec.dim);
    for (std::uint32_t f = 0; f < tensor.n_frames; ++f) {
      const double t = tensor.frame_time(f);
      Eigen::VectorXd phone = Eigen::VectorXd::Zero(dim);
      for (std::size_t s = 0; s < segs.size(); ++s) {
        if (t >= segs[s].start_s && t < segs[s].end_s) phone = phone_proto.row(seq[s]).transpose();
      }
      for (std::uint32_t l = 0; l < spec.n_layers; ++l) {
        auto out = tensor.frame(l, f);
        for (Eigen::Index j = 0; j < dim; ++j) {
          double v = rng.normal();
          if (l == spec.phone_layer) v = phone[j] + class_proto(static_cast<Eigen::Index>(cls), j) + 0.4 * v;
          if (l == spec.pitch_layer) v = 0.5 * v + (f0 - 350.0) / 100.0 * pitch_dir[j];
          out[static_cast<std::size_t>(j)] = static_cast<float>(v);
        }
      }
    }
    write_repr_tensor(dir / "repr" / (id + ".lrep"), tensor);

    UtteranceManifest m;
    m.utterance_id = id;
    m.group_key = "f" + std::to_string(u % spec.n_groups);
    m.duration_s = dur;
    m.repr_path = "repr/" + id + ".lrep";
    if (spec.audio) {
      m.audio_path = "audio/" + id + ".wav";
      dsp::write_wav(dir / *m.audio_path, vowel(f0, dur));
    }
    manifest.push_back(m);
    alignments.insert(alignments.end(), segs.begin(), segs.end());
    labels.push_back({id, "vc", kSyntheticClasses[cls]});
    tracks << id << "\t0\t" << text::format_double(dur) << '\t' << kSyntheticClasses[cls] << '\n';

    // System A substitutes ~10% of phones, system B ~25% and drops some.
    std::vector<int> a, b;
    for (int p : seq) {
      a.push_back(rng.uniform01() < 0.10 ? static_cast<int>((p + 1) % n_phones) : p);
      const double r = rng.uniform01();
      if (r < 0.05) continue;
      b.push_back(r < 0.25 ? static_cast<int>((p + 2) % n_phones) : p);
    }
    ref << id << join(seq) << '\n';
    hyp_a << id << join(a) << '\n';
    hyp_b << id << join(b) << '\n';
  }
  write_manifest(dir / "manifest.jsonl", manifest);
  write_alignments(dir / "alignments.tsv", alignments);
  write_labels(dir / "labels.jsonl", labels);
  text::write_file(dir / "tracks.tsv", tracks.str());
  text::write_file(dir / "ref.txt", ref.str());
  text::write_file(dir / "hyp_a.txt", hyp_a.str());
  text::write_file(dir / "hyp_b.txt", hyp_b.str());
  text::write_file(dir / "config.toml", kConfig);
}

}  // namespace layerprobe::testing
