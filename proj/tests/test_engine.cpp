#include "ttac/bench.hpp"
#include "ttac/engine.hpp"

#include "test_support.hpp"

#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <numeric>

using namespace ttac;
using namespace ttac::testing;

namespace {

DomainSpec small_spec() {
  DomainSpec spec;
  spec.input_dim = 8;
  spec.num_classes = 4;
  spec.train_per_class = 150;
  spec.val_per_class = 50;
  spec.target_samples = 480;
  spec.seed = 3;
  return spec;
}

TrainConfig small_train() {
  TrainConfig t;
  t.arch.hidden = {32};
  t.arch.feature_dim = 8;
  t.epochs = 20;
  return t;
}

const PreparedDomain& domain() {
  static const PreparedDomain d = prepare_domain(small_spec(), small_train());
  return d;
}

Stream target_stream() { return {domain().data.target.inputs, domain().data.target.labels}; }

ProtocolConfig small_config(Protocol protocol) {
  ProtocolConfig c = default_protocol_config();
  c.protocol = protocol;
  c.n_b = 32;
  c.n_c = 128;
  c.n_itr = 2;
  c.n_passes = 2;
  return c;
}

std::vector<SampleId> ids_from(SampleId first, int n) {
  std::vector<SampleId> ids(n);
  std::iota(ids.begin(), ids.end(), first);
  return ids;
}

}  // namespace

TEST_CASE("protocol and method names round trip") {
  for (Protocol p : {Protocol::kNOSF, Protocol::kNOSL, Protocol::kNMSF, Protocol::kNMSL})
    CHECK(protocol_from_string(to_string(p)) == p);
  for (Method m : {Method::kTtacPlusPlus, Method::kTest, Method::kEntropyMin, Method::kStOnly})
    CHECK(method_from_string(to_string(m)) == m);
  CHECK_THROWS_AS(protocol_from_string("N-X-SL"), std::invalid_argument);
  CHECK(is_source_free(Protocol::kNMSF));
  CHECK_FALSE(is_one_pass(Protocol::kNMSL));
}

TEST_CASE("queue evicts whole batches in FIFO order") {
  QueueState q(10);
  std::mt19937_64 rng(1);
  CHECK(q.push_batch(random_matrix(4, 2, rng), ids_from(0, 4)).empty());
  CHECK(q.push_batch(random_matrix(4, 2, rng), ids_from(4, 4)).empty());
  const auto evicted = q.push_batch(random_matrix(4, 2, rng), ids_from(8, 4));
  CHECK(evicted == ids_from(0, 4));
  CHECK(q.size() == 8);
  CHECK(q.ids() == ids_from(4, 8));
  CHECK(q.arrivals() == 12);
  for (int b = 0; b < 20; ++b) {
    q.push_batch(random_matrix(1 + b % 5, 2, rng), ids_from(100 + 10 * b, 1 + b % 5));
    CHECK(q.size() <= q.capacity());
  }
  CHECK_THROWS_AS(q.push_batch(random_matrix(11, 2, rng), ids_from(0, 11)), ContractError);
}

TEST_CASE("config JSON round trip and unknown-key rejection") {
  ProtocolConfig c = small_config(Protocol::kNMSF);
  c.xi = 0.7;
  c.tau_tc_diff = -0.01;
  c.lambda2 = 3.0;
  const ProtocolConfig back = config_from_json(config_to_json(c));
  CHECK(config_to_json(back) == config_to_json(c));

  const ProtocolConfig partial = config_from_json(nlohmann::json{{"n_b", 16}, {"tau_st", 0.5}});
  CHECK(partial.n_b == 16);
  CHECK(partial.tau_st == 0.5);
  CHECK(partial.n_c == ProtocolConfig{}.n_c);

  CHECK_THROWS_AS(config_from_json(nlohmann::json{{"n_bb", 16}}), std::invalid_argument);
  CHECK_THROWS_AS(config_from_json(nlohmann::json{{"xi", 1.5}}), ContractError);
  for (const char* key : {"xi", "tau_tc_diff", "tau_pp_conf", "tau_st", "n_clip", "n_clip_k",
                          "lambda1", "lambda2", "n_c", "n_itr", "n_b"})
    CHECK(config_to_json(c).contains(key));
}

TEST_CASE("untrained model errs at chance level") {
  const ModelParams model = ModelParams::init(small_arch(8, 16, 8, 4), 5);
  std::mt19937_64 rng(5);
  const Matrix x = random_matrix(4000, 8, rng);
  std::vector<int> labels(4000);
  for (int i = 0; i < 4000; ++i) labels[i] = i % 4;
  std::shuffle(labels.begin(), labels.end(), rng);
  const StreamReport r = run_baseline(Method::kTest, small_config(Protocol::kNOSL), model, {x, labels});
  const double sigma = std::sqrt(0.75 * 0.25 / 4000);
  CHECK(std::abs(r.final_error() - 0.75) < 3 * sigma);
}

TEST_CASE("TEST matches offline evaluation of the frozen model") {
  const StreamReport r =
      run_baseline(Method::kTest, small_config(Protocol::kNOSL), domain().source.model, target_stream());
  CHECK(r.final_error() == doctest::Approx(1.0 - accuracy(domain().source.model, domain().data.target)));
}

TEST_CASE("zero adaptation epochs reduce TTAC++ to TEST") {
  ProtocolConfig c = small_config(Protocol::kNOSL);
  c.n_itr = 0;
  const StreamReport ttac = run_stream(c, domain().source.bank, domain().source.model, target_stream());
  const StreamReport test = run_baseline(Method::kTest, c, domain().source.model, target_stream());
  REQUIRE(ttac.predictions.size() == test.predictions.size());
  for (std::size_t i = 0; i < ttac.predictions.size(); ++i)
    CHECK(ttac.predictions[i].label == test.predictions[i].label);
  CHECK(ttac.steps.empty());
}

TEST_CASE("runs are deterministic") {
  for (Protocol p : {Protocol::kNOSL, Protocol::kNMSF}) {
    const ProtocolConfig c = small_config(p);
    const SourceBank& bank = is_source_free(p) ? domain().inferred : domain().source.bank;
    const StreamReport a = run_stream(c, bank, domain().source.model, target_stream());
    const StreamReport b = run_stream(c, bank, domain().source.model, target_stream());
    CHECK(a.same_outcome(b));
  }
}

TEST_CASE("one interleaved pass of N-M equals N-O") {
  ProtocolConfig no = small_config(Protocol::kNOSL);
  ProtocolConfig nm = small_config(Protocol::kNMSL);
  nm.n_passes = 1;
  nm.interleave_inference = true;
  const StreamReport a = run_stream(no, domain().source.bank, domain().source.model, target_stream());
  const StreamReport b = run_stream(nm, domain().source.bank, domain().source.model, target_stream());
  CHECK(a.final_error() == b.final_error());
  REQUIRE(a.predictions.size() == b.predictions.size());
  for (std::size_t i = 0; i < a.predictions.size(); ++i)
    CHECK(a.predictions[i].label == b.predictions[i].label);
}

TEST_CASE("committed predictions are causal") {
  const ProtocolConfig c = small_config(Protocol::kNOSL);
  const Stream full = target_stream();
  const StreamReport whole = run_stream(c, domain().source.bank, domain().source.model, full);
  const Eigen::Index prefix = 200;
  const Stream head{full.inputs.topRows(prefix),
                    std::vector<int>(full.labels.begin(), full.labels.begin() + prefix)};
  const StreamReport part = run_stream(c, domain().source.bank, domain().source.model, head);
  REQUIRE(part.predictions.size() == static_cast<std::size_t>(prefix));
  for (Eigen::Index i = 0; i < prefix; ++i) CHECK(part.predictions[i].label == whole.predictions[i].label);
}

TEST_CASE("provenance must match the protocol") {
  const Stream s = target_stream();
  CHECK_THROWS_AS(run_stream(small_config(Protocol::kNOSF), domain().source.bank, domain().source.model, s),
                  ContractError);
  CHECK_THROWS_AS(run_stream(small_config(Protocol::kNOSL), domain().inferred, domain().source.model, s),
                  ContractError);
  CHECK_NOTHROW(run_stream(small_config(Protocol::kNOSF), domain().inferred, domain().source.model, s));
}

TEST_CASE("baselines run and TTAC++ is not one") {
  const Stream s = target_stream();
  for (Method m : {Method::kEntropyMin, Method::kStOnly}) {
    const StreamReport r = run_baseline(m, small_config(Protocol::kNOSL), domain().source.model, s);
    CHECK(r.predictions.size() == static_cast<std::size_t>(s.size()));
    CHECK(std::isfinite(r.final_error()));
  }
  CHECK_THROWS_AS(
      run_baseline(Method::kTtacPlusPlus, small_config(Protocol::kNOSL), domain().source.model, s),
      ContractError);
}

TEST_CASE("report files are written") {
  const StreamReport r =
      run_stream(small_config(Protocol::kNOSL), domain().source.bank, domain().source.model, target_stream());
  const auto dir = std::filesystem::temp_directory_path() / "ttac_test_report";
  std::filesystem::remove_all(dir);
  r.write(dir);
  for (const char* f : {"report.json", "cumulative_error.csv", "predictions.csv"})
    CHECK(std::filesystem::exists(dir / f));
  std::ifstream in(dir / "report.json");
  const nlohmann::json j = nlohmann::json::parse(in);
  CHECK(j.at("protocol") == "N-O-SL");
  std::ifstream preds(dir / "predictions.csv");
  std::string line;
  int lines = 0;
  while (std::getline(preds, line)) ++lines;
  CHECK(lines == 1 + static_cast<int>(r.predictions.size()));
  std::filesystem::remove_all(dir);
}

TEST_CASE("loss breakdown totals are recomputable") {
  const StreamReport r =
      run_stream(small_config(Protocol::kNOSL), domain().source.bank, domain().source.model, target_stream());
  REQUIRE_FALSE(r.steps.empty());
  for (const auto& s : r.steps) {
    if (s.skipped) continue;
    CHECK(std::abs(s.losses.total - s.losses.recompute_total()) <= 1e-12 * std::max(1.0, std::abs(s.losses.total)));
  }
}

TEST_CASE("snapshot channel publishes immutable versions") {
  const ModelParams a = ModelParams::init(small_arch(4, 6, 5, 3), 1);
  ModelSnapshotChannel channel(a);
  const auto first = channel.latest();
  CHECK(channel.version() == 0);
  ModelParams b = a;
  b.classifier.setZero();
  channel.publish(b);
  CHECK(channel.version() == 1);
  CHECK(first->classifier == a.classifier);
  CHECK(channel.latest()->classifier.isZero(0.0));
}
