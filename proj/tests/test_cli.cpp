#include <catch2/catch_amalgamated.hpp>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>

namespace fs = std::filesystem;

namespace {

struct CmdResult {
    int code = -1;
    std::string out;
    std::string err;
};

std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

fs::path work_dir() {
    static fs::path dir = [] {
        fs::path d = fs::temp_directory_path() / "cmp-cli-test";
        fs::remove_all(d);
        fs::create_directories(d);
        return d;
    }();
    return dir;
}

CmdResult run_cli(const std::string& args) {
    fs::path out = work_dir() / "stdout.txt", err = work_dir() / "stderr.txt";
    std::string cmd = std::string(CMP_CLI_PATH) + " " + args + " >" + out.string() + " 2>" +
                      err.string();
    int status = std::system(cmd.c_str());
    CmdResult r;
    r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
    r.out = slurp(out);
    r.err = slurp(err);
    return r;
}

fs::path write_config(const std::string& name, const std::string& extra = "") {
    fs::path p = work_dir() / name;
    std::ofstream f(p);
    f << "data.source = synth\n"
         "data.classes = 3\n"
         "data.dim = 6\n"
         "data.samples_per_class = 12\n"
         "data.class_sep = 3.0\n"
         "stream.splits = 3\n"
         "strategy.method = cmp\n"
         "strategy.base_ssl = simsiam\n"
         "strategy.alpha = 1.0\n"
         "strategy.beta = 1.0\n"
         "strategy.eps_sq = 0.2\n"
         "strategy.n_patches = 3\n"
         "strategy.b_s = 6\n"
         "optimizer.lr = 0.02\n"
         "model.embed_dim = 6\n"
         "model.mlp_widths = 6,12\n"
         "model.projector_widths = 6\n";
    f << extra;
    return p;
}

}  // namespace

TEST_CASE("train writes the full artifact set") {
    fs::path cfg = write_config("ok.cfg");
    fs::path run = work_dir() / "run-a";
    CmdResult r = run_cli("train --config " + cfg.string() + " --out " + run.string() +
                          " --seed 11");
    INFO(r.err);
    CHECK(r.code == 0);
    CHECK(fs::exists(run / "config.resolved"));
    CHECK(fs::exists(run / "steps.jsonl"));
    CHECK(fs::exists(run / "checkpoint.cmpc"));

    // resolved config round-trips: seed and every hyperparameter are pinned
    std::string resolved = slurp(run / "config.resolved");
    CHECK(resolved.find("run.seed = 11") != std::string::npos);
    CHECK(resolved.find("strategy.method = cmp") != std::string::npos);
    CHECK(resolved.find("optimizer.lr = 0.02") != std::string::npos);

    std::string steps = slurp(run / "steps.jsonl");
    CHECK(steps.find("\"loss\":") != std::string::npos);
    CHECK(steps.find("\"ms\"") == std::string::npos);  // no wall clock in the file
}

TEST_CASE("unknown config key fails with exit 2 naming the key") {
    fs::path cfg = write_config("typo.cfg", "alhpa = 1.0\n");
    CmdResult r = run_cli("train --config " + cfg.string() + " --out " +
                          (work_dir() / "run-typo").string());
    CHECK(r.code == 2);
    CHECK(r.err.find("alhpa") != std::string::npos);
    CHECK(r.err.find("\"key\"") != std::string::npos);  // machine-readable JSON on stderr
}

TEST_CASE("missing mandatory hyperparameter fails with exit 2") {
    // drop lr by writing the config without it
    fs::path p = work_dir() / "nolr.cfg";
    std::string text = slurp(write_config("tmp.cfg"));
    std::string needle = "optimizer.lr = 0.02\n";
    text.erase(text.find(needle), needle.size());
    std::ofstream(p) << text;
    CmdResult r = run_cli("train --config " + p.string() + " --out " +
                          (work_dir() / "run-nolr").string());
    CHECK(r.code == 2);
    CHECK(r.err.find("optimizer.lr") != std::string::npos);
}

TEST_CASE("identical config and seed reproduce metrics byte for byte") {
    fs::path cfg = write_config("det.cfg");
    fs::path r1 = work_dir() / "det-1", r2 = work_dir() / "det-2", r3 = work_dir() / "det-3";
    CHECK(run_cli("train --config " + cfg.string() + " --out " + r1.string() + " --seed 5").code ==
          0);
    CHECK(run_cli("train --config " + cfg.string() + " --out " + r2.string() + " --seed 5").code ==
          0);
    CHECK(run_cli("train --config " + cfg.string() + " --out " + r3.string() + " --seed 6").code ==
          0);
    // compared as booleans: a mismatch should not dump whole files
    bool steps_identical = slurp(r1 / "steps.jsonl") == slurp(r2 / "steps.jsonl");
    bool ckpt_identical = slurp(r1 / "checkpoint.cmpc") == slurp(r2 / "checkpoint.cmpc");
    bool other_seed_differs = slurp(r1 / "steps.jsonl") != slurp(r3 / "steps.jsonl");
    CHECK(steps_identical);
    CHECK(ckpt_identical);
    CHECK(other_seed_differs);
}

TEST_CASE("probe emits a result file and is deterministic") {
    fs::path cfg = write_config("probe.cfg");
    fs::path run = work_dir() / "run-probe";
    REQUIRE(run_cli("train --config " + cfg.string() + " --out " + run.string()).code == 0);

    CmdResult p1 = run_cli("probe --checkpoint " + (run / "checkpoint.cmpc").string());
    INFO(p1.err);
    CHECK(p1.code == 0);
    CHECK(fs::exists(run / "probe.json"));
    std::string first = slurp(run / "probe.json");
    CHECK(first.find("test_accuracy") != std::string::npos);
    CHECK(first.find("effective_rank") != std::string::npos);

    CHECK(run_cli("probe --checkpoint " + (run / "checkpoint.cmpc").string()).code == 0);
    CHECK(slurp(run / "probe.json") == first);
}

TEST_CASE("corrupt checkpoint is refused with exit 4") {
    fs::path cfg = write_config("crc.cfg");
    fs::path run = work_dir() / "run-crc";
    REQUIRE(run_cli("train --config " + cfg.string() + " --out " + run.string()).code == 0);

    fs::path ckpt = run / "checkpoint.cmpc";
    std::string blob = slurp(ckpt);
    blob[blob.size() / 2] ^= 0x01;  // flip one payload bit
    std::ofstream(ckpt, std::ios::binary) << blob;

    CmdResult r = run_cli("probe --checkpoint " + ckpt.string());
    CHECK(r.code == 4);
    CHECK(r.err.find("CRC") != std::string::npos);
}

TEST_CASE("table aggregates seeds of one config into one row") {
    fs::path cfg = write_config("table.cfg");
    fs::path base = work_dir() / "sweep";
    REQUIRE(run_cli("train --config " + cfg.string() + " --out " + base.string() +
                    " --seed 1 --seeds 3")
                .code == 0);
    for (int s = 1; s <= 3; ++s) {
        fs::path run = base / ("seed-" + std::to_string(s));
        REQUIRE(fs::exists(run / "checkpoint.cmpc"));
        REQUIRE(run_cli("probe --checkpoint " + (run / "checkpoint.cmpc").string()).code == 0);
    }
    fs::path csv = work_dir() / "table.csv";
    CmdResult r = run_cli("table " + (base / "seed-1").string() + " " +
                          (base / "seed-2").string() + " " + (base / "seed-3").string() +
                          " --out " + csv.string());
    INFO(r.err);
    CHECK(r.code == 0);
    CHECK(r.out.find("simsiam") != std::string::npos);
    CHECK(r.out.find("cmp") != std::string::npos);
    CHECK(r.out.find("+-") != std::string::npos);  // std over 3 seeds present

    std::string table = slurp(csv);
    // header + exactly one data row: all seeds share a config hash
    CHECK(std::count(table.begin(), table.end(), '\n') == 2);
    CHECK(table.find(",3,") != std::string::npos);  // seed count column
}

TEST_CASE("table without probe results fails cleanly") {
    fs::path cfg = write_config("noprobe.cfg");
    fs::path run = work_dir() / "run-noprobe";
    REQUIRE(run_cli("train --config " + cfg.string() + " --out " + run.string()).code == 0);
    CmdResult r = run_cli("table " + run.string());
    CHECK(r.code == 2);
    CHECK(r.err.find("probe.json") != std::string::npos);
}

TEST_CASE("synth-data writes a loadable dataset") {
    fs::path out = work_dir() / "synth.csv";
    CmdResult r = run_cli("synth-data --classes 3 --dim 4 --samples-per-class 5 "
                          "--class-sep 2.0 --seed 7 --out " + out.string());
    CHECK(r.code == 0);
    std::string text = slurp(out);
    CHECK(text.rfind("4,3\n", 0) == 0);  // dim,classes header
    CHECK(std::count(text.begin(), text.end(), '\n') == 16);  // header + 15 rows
}

TEST_CASE("gradcheck subcommand passes") {
    CmdResult r = run_cli("gradcheck");
    CHECK(r.code == 0);
    for (const char* name : {"tcr_loss", "simsiam_loss", "byol_loss", "simsiam_cmp_loss",
                             "byol_cmp_loss", "empssl_loss"}) {
        CHECK(r.out.find(std::string("PASS ") + name) != std::string::npos);
    }
    CHECK(r.out.find("FAIL") == std::string::npos);
}

TEST_CASE("bad CMP_NUM_THREADS is rejected") {
    CmdResult r = run_cli("gradcheck");
    CHECK(r.code == 0);
    fs::path out = work_dir() / "stdout.txt", err = work_dir() / "stderr.txt";
    std::string cmd = std::string("CMP_NUM_THREADS=zero ") + CMP_CLI_PATH + " gradcheck >" +
                      out.string() + " 2>" + err.string();
    int status = std::system(cmd.c_str());
    CHECK((WIFEXITED(status) ? WEXITSTATUS(status) : -1) == 2);
    CHECK(slurp(err).find("CMP_NUM_THREADS") != std::string::npos);
}
