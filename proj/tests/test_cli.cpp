#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <sstream>

#include "rlrr/checkpoint.hpp"
#include "rlrr/cli.hpp"
#include "rlrr/error.hpp"

using namespace rlrr;
namespace fs = std::filesystem;

namespace {

struct Result {
  int code;
  std::string out;
  std::string err;
};

Result rlrr_cmd(const std::vector<std::string>& args) {
  std::ostringstream out, err;
  int code = cli::run(args, out, err);
  return {code, out.str(), err.str()};
}

fs::path workdir() {
  static const fs::path dir = [] {
    auto d = fs::temp_directory_path() / "rlrr_test_cli";
    fs::remove_all(d);
    fs::create_directories(d);
    return d;
  }();
  return dir;
}

std::string path(const std::string& name) { return (workdir() / name).string(); }

std::string write(const std::string& name, const std::string& text) {
  std::ofstream(path(name)) << text;
  return path(name);
}

std::string slurp(const std::string& p) {
  std::ifstream f(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(f), std::istreambuf_iterator<char>()};
}

const std::string kToy = R"(method.name = rlrr
method.init = normal
vit.dim = 16
vit.layers = 2
vit.heads = 2
vit.classes = 4
pretrain.epochs = 6
pretrain.warmup_epochs = 1
train.epochs = 6
train.warmup_epochs = 1
train.learning_rate = 0.01
task.train_per_class = 8
task.val_per_class = 4
task.test_per_class = 4
)";

std::vector<std::vector<double>> logits(const std::string& csv) {
  std::vector<std::vector<double>> rows;
  std::stringstream s(csv);
  std::string line;
  std::getline(s, line);
  while (std::getline(s, line)) {
    std::stringstream ls(line);
    std::string cell;
    std::vector<double> row;
    for (int i = 0; std::getline(ls, cell, ','); ++i)
      if (i >= 3) row.push_back(std::stod(cell));
    rows.push_back(row);
  }
  return rows;
}

// Pretrained once for the whole file.
const std::string& backbone() {
  static const std::string b = [] {
    auto cfg = write("toy.cfg", kToy);
    auto r = rlrr_cmd({"pretrain-toy", "--config", cfg, "--out", path("pre")});
    REQUIRE(r.code == 0);
    return path("pre/backbone.ckpt");
  }();
  return b;
}

}  // namespace

TEST_CASE("help lists every flag and exits 0") {
  const std::map<std::string, std::vector<std::string>> flags = {
      {"pretrain-toy", {"--config", "--out", "--seed", "--set"}},
      {"train", {"--backbone", "--method", "--grid", "--allow-narrowing"}},
      {"eval", {"--checkpoint", "--split"}},
      {"merge", {"--checkpoint"}},
      {"analyze", {"--before", "--after", "--slot"}},
      {"count-params", {"--method"}},
      {"combine", {"--inputs", "--weights", "--mode", "--head-from"}},
      {"gradcheck", {"--method", "--config"}},
      {"ablate", {"--axes", "--jobs", "--backbone"}}};
  for (const auto& [cmd, fl] : flags) {
    auto r = rlrr_cmd({cmd, "--help"});
    CAPTURE(cmd);
    CHECK(r.code == 0);
    for (const auto& f : fl) CHECK(r.out.find(f) != std::string::npos);
    CHECK(r.out.find("--out") != std::string::npos);
  }
  CHECK(rlrr_cmd({"--help"}).code == 0);
}

TEST_CASE("bad invocations are rejected") {
  CHECK(rlrr_cmd({}).code == 1);
  CHECK(rlrr_cmd({"frobnicate"}).code == 1);
  auto r = rlrr_cmd({"count-params", "--config", write("c.cfg", "method.name = rlrr\n"), "--bogus"});
  CHECK(r.code == 1);
  CHECK(r.err.find("bogus") != std::string::npos);
  CHECK(rlrr_cmd({"train", "--config", path("c.cfg")}).code == 1);  // no --out
}

TEST_CASE("exit codes separate domain and io errors") {
  auto bad = write("bad.cfg", "method.name = rlrr\nmethod.rank = 2\n");
  auto r = rlrr_cmd({"count-params", "--config", bad});
  CHECK(r.code == 1);
  CHECK(r.err.find("line 2") != std::string::npos);

  CHECK(rlrr_cmd({"count-params", "--config", path("missing.cfg")}).code == 2);

  auto cfg = write("toy.cfg", kToy);
  CHECK(rlrr_cmd({"eval", "--config", cfg, "--checkpoint", path("missing.ckpt")}).code == 2);
  auto corrupt = write("corrupt.ckpt", "RLRRCKPT garbage");
  r = rlrr_cmd({"eval", "--config", cfg, "--checkpoint", corrupt});
  CHECK(r.code == 2);
  CHECK_FALSE(r.err.empty());

  // A backbone of another geometry is a shape error.
  r = rlrr_cmd({"eval", "--config", cfg, "--set", "vit.dim=8", "--checkpoint", backbone()});
  CHECK(r.code == 1);
}

TEST_CASE("count-params matches enumeration at ViT-B geometry") {
  auto vitb = write("vitb.cfg", R"(method.name = full
vit.image_h = 224
vit.image_w = 224
vit.patch = 16
vit.dim = 768
vit.layers = 12
vit.heads = 12
vit.classes = 100
)");
  auto r = rlrr_cmd({"count-params", "--config", vitb, "--method", "rlrr", "--out", path("count")});
  CHECK(r.code == 0);
  CHECK(r.out.find("adapted total: 287232") != std::string::npos);
  CHECK(r.out.find("matches enumeration") != std::string::npos);
  auto csv = slurp(path("count/params.csv"));
  CHECK(csv.rfind("label,count\n", 0) == 0);

  r = rlrr_cmd({"count-params", "--config", vitb});
  CHECK(r.code == 0);
  CHECK(r.out.find("= 85798656 (matches enumeration)") != std::string::npos);
  for (auto m : {"lora", "ssf", "adapter", "vpt_shallow", "vpt_deep", "rankr_rlrr"}) {
    r = rlrr_cmd({"count-params", "--config", vitb, "--method", m});
    CAPTURE(m);
    CHECK(r.code == 0);
    CHECK(r.out.find("matches enumeration") != std::string::npos);
  }
}

TEST_CASE("train, merge and eval agree") {
  auto cfg = write("toy.cfg", kToy);
  auto r = rlrr_cmd({"train", "--config", cfg, "--backbone", backbone(), "--out", path("tuned")});
  REQUIRE(r.code == 0);
  CHECK(fs::exists(path("tuned/metrics.csv")));
  CHECK(fs::exists(path("tuned/config.cfg")));
  REQUIRE(rlrr_cmd({"merge", "--config", cfg, "--checkpoint", path("tuned/tuned.ckpt"), "--out",
                    path("merged")}).code == 0);
  auto merged = io::load_checkpoint(path("merged/merged.ckpt"));
  for (const auto& [name, t] : merged) CHECK(name.rfind(io::kAdapterPrefix, 0) != 0);

  for (std::string split : {"val", "test"}) {
    REQUIRE(rlrr_cmd({"eval", "--config", cfg, "--checkpoint", path("tuned/tuned.ckpt"), "--split", split,
                      "--out", path("e_tuned")}).code == 0);
    REQUIRE(rlrr_cmd({"eval", "--config", cfg, "--checkpoint", path("merged/merged.ckpt"), "--split", split,
                      "--out", path("e_merged")}).code == 0);
    CHECK(slurp(path("e_tuned/eval.csv")) == slurp(path("e_merged/eval.csv")));
    auto a = logits(slurp(path("e_tuned/logits.csv")));
    auto b = logits(slurp(path("e_merged/logits.csv")));
    REQUIRE(a.size() == b.size());
    REQUIRE(!a.empty());
    double worst = 0;
    for (std::size_t i = 0; i < a.size(); ++i)
      for (std::size_t j = 0; j < a[i].size(); ++j) worst = std::max(worst, std::abs(a[i][j] - b[i][j]));
    CHECK(worst < 1e-10);
  }

  // Adapter-free methods have nothing to merge.
  auto vpt = kToy;
  vpt.replace(vpt.find("method.init = normal\n"), 21, "");
  auto vpt_cfg = write("vpt.cfg", vpt);
  r = rlrr_cmd({"train", "--config", vpt_cfg, "--method", "vpt_deep", "--backbone", backbone(), "--out",
                path("vpt")});
  REQUIRE(r.code == 0);
  CHECK(rlrr_cmd({"merge", "--config", vpt_cfg, "--method", "vpt_deep", "--checkpoint",
                  path("vpt/tuned.ckpt"), "--out", path("vpt_m")}).code == 1);
}

TEST_CASE("file outputs are reproducible under a fixed seed") {
  auto cfg = write("toy.cfg", kToy);
  for (const char* dir : {"s1", "s2"})
    REQUIRE(rlrr_cmd({"train", "--config", cfg, "--backbone", backbone(), "--seed", "5", "--out",
                      path(dir)}).code == 0);
  CHECK(slurp(path("s1/tuned.ckpt")) == slurp(path("s2/tuned.ckpt")));
  CHECK(slurp(path("s1/metrics.csv")) == slurp(path("s2/metrics.csv")));
  REQUIRE(rlrr_cmd({"train", "--config", cfg, "--backbone", backbone(), "--seed", "6", "--out",
                    path("s3")}).code == 0);
  CHECK(slurp(path("s1/tuned.ckpt")) != slurp(path("s3/tuned.ckpt")));

  for (const char* dir : {"p1", "p2"})
    REQUIRE(rlrr_cmd({"pretrain-toy", "--config", cfg, "--out", path(dir)}).code == 0);
  CHECK(slurp(path("p1/backbone.ckpt")) == slurp(path("p2/backbone.ckpt")));
}

TEST_CASE("analyze reports the null perturbation for identical files") {
  auto r = rlrr_cmd({"analyze", "--before", backbone(), "--after", backbone(), "--slot", "l1.fc1", "--out",
                     path("an")});
  REQUIRE(r.code == 0);
  std::stringstream s(slurp(path("an/spectrum_l1.fc1.csv")));
  std::string line;
  std::getline(s, line);
  CHECK(line == "index,sigma_before,sigma_after,alignment");
  std::size_t rows = 0;
  while (std::getline(s, line)) {
    CHECK(line.substr(line.rfind(',') + 1) == "1");
    ++rows;
  }
  CHECK(rows == 16);

  auto cfg = write("toy.cfg", kToy);
  REQUIRE(rlrr_cmd({"train", "--config", cfg, "--backbone", backbone(), "--out", path("tuned_an")}).code == 0);
  r = rlrr_cmd({"analyze", "--before", backbone(), "--after", path("tuned_an/tuned.ckpt"), "--slot", "l0.q"});
  CHECK(r.code == 0);
  CHECK(r.out.find("delta effective rank") != std::string::npos);
  CHECK(rlrr_cmd({"analyze", "--before", backbone(), "--after", backbone(), "--slot", "l9.q"}).code == 1);
}

TEST_CASE("combine with one-hot weights reproduces the selected input") {
  auto cfg = write("toy.cfg", kToy);
  REQUIRE(rlrr_cmd({"train", "--config", cfg, "--backbone", backbone(), "--seed", "1", "--out", path("c1")}).code == 0);
  REQUIRE(rlrr_cmd({"train", "--config", cfg, "--backbone", backbone(), "--seed", "2", "--out", path("c2")}).code == 0);
  REQUIRE(rlrr_cmd({"combine", "--config", cfg, "--inputs", path("c1/tuned.ckpt") + "," + path("c2/tuned.ckpt"),
                    "--weights", "0,1", "--head-from", "1", "--out", path("comb")}).code == 0);
  CHECK(io::load_checkpoint(path("comb/combined.ckpt")) == io::load_checkpoint(path("c2/tuned.ckpt")));

  REQUIRE(rlrr_cmd({"combine", "--config", cfg, "--inputs", path("c1/tuned.ckpt") + "," + path("c2/tuned.ckpt"),
                    "--mode", "sum_of_products", "--out", path("comb2")}).code == 0);
  auto r = rlrr_cmd({"eval", "--config", path("comb2/config.cfg"), "--checkpoint", path("comb2/combined.ckpt")});
  CHECK(r.code == 0);
  CHECK(rlrr_cmd({"combine", "--config", cfg, "--inputs", path("c1/tuned.ckpt"), "--weights", "1,2", "--out",
                  path("comb3")}).code == 1);
}

TEST_CASE("gradcheck passes for every method") {
  auto cfg = write("gc.cfg", "method.name = rlrr\nvit.dim = 4\nvit.layers = 2\nvit.heads = 2\nvit.classes = 3\n");
  for (auto m : {"rlrr", "rankr_rlrr", "rlrr_no_residual", "lora", "ssf", "adapter", "vpt_shallow", "vpt_deep"}) {
    std::vector<std::string> args = {"gradcheck", "--config", cfg, "--method", m, "--out", path("gc")};
    if (std::string(m).find("rlrr") != std::string::npos)
      args.insert(args.end(), {"--set", "method.init=normal"});
    if (std::string(m) == "adapter") args.insert(args.end(), {"--set", "method.bottleneck=2"});
    if (std::string(m) == "rankr_rlrr" || std::string(m) == "rlrr_no_residual" || std::string(m) == "lora")
      args.insert(args.end(), {"--set", "method.rank=2"});
    auto r = rlrr_cmd(args);
    const std::string method = m;
    CAPTURE(method);
    CAPTURE(r.err);
    CHECK(r.code == 0);
  }
  CHECK(slurp(path("gc/gradcheck.csv")).rfind("name,max_rel_error,", 0) == 0);
}

TEST_CASE("ablation table") {
  auto cfg = write("toy.cfg", kToy);
  auto r = rlrr_cmd({"ablate", "--config", cfg, "--backbone", backbone(), "--axes",
                     "dual,left-only,right-only,residual-off", "--jobs", "3", "--out", path("ab")});
  REQUIRE(r.code == 0);
  std::stringstream s(slurp(path("ab/ablation.csv")));
  std::string line;
  std::getline(s, line);
  CHECK(line == "cell,name,left,right,residual,modules,layers,params,val_acc,test_acc");
  std::vector<std::vector<std::string>> rows;
  while (std::getline(s, line)) {
    std::vector<std::string> cells;
    std::stringstream ls(line);
    std::string c;
    while (std::getline(ls, c, ',')) cells.push_back(c);
    rows.push_back(cells);
  }
  REQUIRE(rows.size() == 4);
  CHECK(std::stoul(rows[1][7]) < std::stoul(rows[0][7]));  // left only trains fewer than dual
  CHECK(rows[3][4] == "0");

  // Thread count does not change the table.
  REQUIRE(rlrr_cmd({"ablate", "--config", cfg, "--backbone", backbone(), "--axes",
                    "dual,left-only,right-only,residual-off", "--out", path("ab1")}).code == 0);
  CHECK(slurp(path("ab/ablation.csv")) == slurp(path("ab1/ablation.csv")));

  // A single cell equals a plain train run.
  REQUIRE(rlrr_cmd({"ablate", "--config", cfg, "--backbone", backbone(), "--axes", "dual", "--out",
                    path("ab_one")}).code == 0);
  REQUIRE(rlrr_cmd({"train", "--config", cfg, "--backbone", backbone(), "--out", path("plain")}).code == 0);
  auto ev = rlrr_cmd({"eval", "--config", cfg, "--checkpoint", path("plain/tuned.ckpt"), "--out", path("plain_e")});
  REQUIRE(ev.code == 0);
  std::stringstream one(slurp(path("ab_one/ablation.csv")));
  std::getline(one, line);
  std::getline(one, line);
  auto val = line.substr(0, line.rfind(','));
  val = val.substr(val.rfind(',') + 1);
  CHECK(slurp(path("plain_e/eval.csv")).find("val," + val + ",") != std::string::npos);

  CHECK(rlrr_cmd({"ablate", "--config", cfg, "--axes", "sideways", "--out", path("ab2")}).code == 1);
}
