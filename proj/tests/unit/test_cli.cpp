#include <doctest.h>

#include <sys/wait.h>
#include <unistd.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>

#include <json.hpp>

namespace fs = std::filesystem;

namespace {

// Scratch directory removed at scope exit.
struct Workspace {
  fs::path dir;
  Workspace() {
    dir = fs::temp_directory_path() / ("mixfit_cli_" + std::to_string(::getpid()));
    fs::remove_all(dir);
    fs::create_directories(dir);
  }
  ~Workspace() { fs::remove_all(dir); }

  fs::path write(const std::string& name, const std::string& text) const {
    std::ofstream(dir / name) << text;
    return dir / name;
  }
};

int run(const std::string& args) {
  const std::string cmd = std::string(MIXFIT_CLI_PATH) + " " + args + " >/dev/null 2>&1";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

nlohmann::json read_json(const fs::path& p) { return nlohmann::json::parse(slurp(p)); }

std::size_t line_count(const fs::path& p) {
  std::ifstream in(p);
  std::string line;
  std::size_t n = 0;
  while (std::getline(in, line)) ++n;
  return n;
}

// Every output in the manifest exists; JSON outputs parse.
void check_manifest(const fs::path& out) {
  const fs::path manifest = out / "manifest.json";
  REQUIRE(fs::exists(manifest));
  const auto m = read_json(manifest);
  CHECK(m.contains("seed"));
  CHECK(m.contains("started_at"));
  REQUIRE(m["outputs"].is_array());
  CHECK_FALSE(m["outputs"].empty());
  for (const auto& o : m["outputs"]) {
    const fs::path p = fs::path(o.get<std::string>());
    const fs::path full = p.is_absolute() ? p : out.parent_path() / p;
    CHECK_MESSAGE(fs::exists(full), full.string());
    if (full.extension() == ".json") CHECK_NOTHROW(read_json(full));
  }
}

bool empty_or_missing(const fs::path& dir) { return !fs::exists(dir) || fs::is_empty(dir); }

const char* kGenerate = R"(command = "generate"
seed = 3
units = 60
periods = 3
groups = 2
dim = 2
)";

}  // namespace

TEST_SUITE("cli") {
  TEST_CASE("generate, fit and cv on a simulated panel") {
    Workspace ws;
    const auto gen = ws.write("gen.toml", kGenerate);
    REQUIRE(run("generate --config " + gen.string() + " --out-dir " + (ws.dir / "g").string()) == 0);
    check_manifest(ws.dir / "g");
    const fs::path csv = ws.dir / "g" / "panel.csv";
    REQUIRE(fs::exists(csv));
    const std::string before = slurp(csv);

    const auto fit = ws.write("fit.toml", R"(command = "fit"
data = "g/panel.csv"
groups = 2
algorithm = "CEM"
inits = 3
seed = 1
)");
    REQUIRE(run("fit --config " + fit.string() + " --out-dir " + (ws.dir / "f").string()) == 0);
    check_manifest(ws.dir / "f");
    const auto report = read_json(ws.dir / "f" / "fit_report.json");
    CHECK(report["groups"] == 2);
    CHECK(report["estimates"].size() == 2);
    CHECK(report.contains("transition_counts"));
    // Truth labels travel with generated data.
    CHECK(report["misclassification"].contains("rate"));
    CHECK(slurp(csv) == before);

    const auto one = ws.write("fit1.toml", R"(command = "fit"
data = "g/panel.csv"
groups = 1
algorithm = "EM"
inits = 1
seed = 1
)");
    CHECK(run("fit --config " + one.string() + " --out-dir " + (ws.dir / "f1").string()) == 0);

    const auto cv = ws.write("cv.toml", R"(command = "cv"
data = "g/panel.csv"
groups = [1, 2]
algorithm = "CEM"
folds = 2
repetitions = 3
inits = 2
seed = 5
)");
    REQUIRE(run("cv --config " + cv.string() + " --out-dir " + (ws.dir / "c").string()) == 0);
    check_manifest(ws.dir / "c");
    // Header, then per G: R * K fold rows and a summary row.
    CHECK(line_count(ws.dir / "c" / "cv_folds.csv") == 1 + 2 * (3 * 2 + 1));
    const std::string rel = slurp(ws.dir / "c" / "cv_relative_rmse.csv");
    CHECK(rel.find("\n1,CEM,") != std::string::npos);
    const auto cvj = read_json(ws.dir / "c" / "cv_report.json");
    CHECK(cvj["results"][0]["relative_to_G1"] == 1.0);

    // Same config and seed reproduce the data files byte for byte.
    REQUIRE(run("cv --config " + cv.string() + " --out-dir " + (ws.dir / "c2").string()) == 0);
    CHECK(slurp(ws.dir / "c" / "cv_folds.csv") == slurp(ws.dir / "c2" / "cv_folds.csv"));
    CHECK(slurp(ws.dir / "c" / "cv_report.json") == slurp(ws.dir / "c2" / "cv_report.json"));
  }

  TEST_CASE("a single sim1 replication gives a valid report") {
    Workspace ws;
    const auto cfg = ws.write("s1.toml", R"(command = "sim1"
seed = 1
replications = 1
sample_sizes = [50]
family = "normal"
pi1 = 0.5

[[components]]
mu = 1.0
sigma = 1.0

[[components]]
mu = -1.0
sigma = 1.0
)");
    REQUIRE(run("sim1 --config " + cfg.string() + " --out-dir " + (ws.dir / "a").string()) == 0);
    check_manifest(ws.dir / "a");
    CHECK(line_count(ws.dir / "a" / "sim1_parameters.csv") == 1 + 5);
    const std::string header = slurp(ws.dir / "a" / "sim1_parameters.csv").substr(0, 48);
    CHECK(header.rfind("parameter,N,mean_estimate,bias,mse,p2.5,p97.5", 0) == 0);

    REQUIRE(run("sim1 --config " + cfg.string() + " --out-dir " + (ws.dir / "b").string()) == 0);
    CHECK(slurp(ws.dir / "a" / "sim1_parameters.csv") == slurp(ws.dir / "b" / "sim1_parameters.csv"));

    REQUIRE(run("sim1 --config " + cfg.string() + " --seed 2 --out-dir " + (ws.dir / "c").string()) == 0);
    CHECK(slurp(ws.dir / "a" / "sim1_parameters.csv") != slurp(ws.dir / "c" / "sim1_parameters.csv"));
  }

  TEST_CASE("sim2 with only EM has no C-EM columns") {
    Workspace ws;
    const auto cfg = ws.write("s2.toml", R"(command = "sim2"
seed = 2
replications = 2
units = 40
periods = 3
groups = 2
dim = 2
inits = 2
algorithms = ["EM"]
)");
    REQUIRE(run("sim2 --config " + cfg.string() + " --out-dir " + (ws.dir / "a").string()) == 0);
    check_manifest(ws.dir / "a");
    const std::string params = slurp(ws.dir / "a" / "sim2_parameters.csv");
    CHECK(params.find("EM_bias") != std::string::npos);
    CHECK(params.find("CEM") == std::string::npos);
    CHECK(slurp(ws.dir / "a" / "sim2_misclassification.csv").find("CEM") == std::string::npos);
    REQUIRE(run("sim2 --config " + cfg.string() + " --out-dir " + (ws.dir / "b").string()) == 0);
    CHECK(params == slurp(ws.dir / "b" / "sim2_parameters.csv"));
  }

  TEST_CASE("bad input exits with code 2 and writes nothing") {
    Workspace ws;
    const auto bad = ws.write("bad.toml", R"(command = "sim1"
seed = 1
replications = "many"
)");
    CHECK(run("sim1 --config " + bad.string() + " --out-dir " + (ws.dir / "o").string()) == 2);
    CHECK(empty_or_missing(ws.dir / "o"));

    const auto broken = ws.write("broken.toml", "command = \"sim1\"\nseed = [\n");
    CHECK(run("sim1 --config " + broken.string() + " --out-dir " + (ws.dir / "o").string()) == 2);
    CHECK(empty_or_missing(ws.dir / "o"));

    ws.write("empty.csv", "");
    const auto fit = ws.write("fit.toml", R"(command = "fit"
data = "empty.csv"
groups = 2
)");
    CHECK(run("fit --config " + fit.string() + " --out-dir " + (ws.dir / "e").string()) == 2);
    CHECK(empty_or_missing(ws.dir / "e"));

    CHECK(run("sim1 --config " + (ws.dir / "nope.toml").string()) == 2);
    CHECK(run("no-such-command") == 2);
  }

  TEST_CASE("validate-config accepts shipped configs and rejects bad ones") {
    for (const char* name : {"sim1_separated.toml", "sim1_overlapping.toml", "sim1_poisson.json",
                             "sim2_p10.toml", "fit.toml", "cv.toml", "generate.toml"}) {
      CHECK_MESSAGE(run("validate-config --config " + std::string(MIXFIT_CONFIG_DIR) + "/" + name) == 0,
                    name);
    }
    Workspace ws;
    const auto bad = ws.write("bad.toml", "command = \"sim2\"\nunits = -3\n");
    CHECK(run("validate-config --config " + bad.string()) == 2);
    const auto unknown = ws.write("unknown.toml", "command = \"sim2\"\nunitz = 3\n");
    CHECK(run("validate-config --config " + unknown.string()) == 2);
  }

  TEST_CASE("non-convergence is reported, not an error") {
    Workspace ws;
    const auto gen = ws.write("gen.toml", kGenerate);
    REQUIRE(run("generate --config " + gen.string() + " --out-dir " + (ws.dir / "g").string()) == 0);
    const auto fit = ws.write("fit.toml", R"(command = "fit"
data = "g/panel.csv"
groups = 2
algorithm = "EM"
inits = 1
max_iter = 1
seed = 1
)");
    REQUIRE(run("fit --config " + fit.string() + " --out-dir " + (ws.dir / "f").string()) == 0);
    CHECK(read_json(ws.dir / "f" / "fit_report.json")["converged"] == false);
  }
}
