#include "msrs/ablation.hpp"

#include <atomic>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <thread>

#include "msrs/errors.hpp"

namespace fs = std::filesystem;

namespace msrs {

namespace {

std::uint64_t fnv1a_text(const std::string& text) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char c : text) {
        h ^= c;
        h *= 0x100000001b3ULL;
    }
    return h;
}

std::string group_of(const std::string& cell_key) {
    // cell key: g-..._p-..._l-..._a-..._s-<seed>; the group drops the seed
    const std::size_t pos = cell_key.rfind("_s-");
    return cell_key.substr(0, pos);
}

} // namespace

const std::set<std::string>& grid_config_keys() {
    static const std::set<std::string> keys = [] {
        std::set<std::string> k = experiment_config_keys();
        k.insert("axes.granularity");
        k.insert("axes.placement");
        k.insert("axes.seed");
        k.insert("axes.layer");
        k.insert("axes.alignment");
        return k;
    }();
    return keys;
}

std::vector<AblationCell> expand_grid(const Config& grid) {
    const ExperimentConfig base = experiment_from_config(grid);

    std::vector<std::string> grans = grid.get_list("axes.granularity");
    if (grans.empty()) grans.push_back(granularity_to_string(base.granularity));
    std::vector<std::string> placements = grid.get_list("axes.placement");
    if (placements.empty()) placements.push_back(placement_to_string(base.eval.strategy));
    std::vector<std::string> seeds = grid.get_list("axes.seed");
    if (seeds.empty()) seeds.push_back(std::to_string(base.train.seed));
    std::vector<std::string> layers = grid.get_list("axes.layer");
    if (layers.empty()) layers.push_back(std::to_string(base.task.layer));
    std::vector<std::string> aligns = grid.get_list("axes.alignment");
    if (aligns.empty()) aligns.push_back(base.alignment_mode);

    std::vector<AblationCell> cells;
    for (const std::string& g : grans) {
        for (const std::string& p : placements) {
            for (const std::string& l : layers) {
                for (const std::string& a : aligns) {
                    for (const std::string& s : seeds) {
                        AblationCell cell;
                        cell.config = base;
                        cell.config.granularity = granularity_from_string(g);
                        cell.config.eval.strategy = placement_from_string(p);
                        cell.config.task.layer = std::stoi(l);
                        cell.config.alignment_mode = a;
                        if (a != "full" && a != "reft" && a != "svd_fixed") {
                            throw config_error("axes.alignment: unknown mode '" + a + "'");
                        }
                        cell.config.train.seed = std::stoull(s);
                        cell.key = "g-" + g + "_p-" + p + "_l-" + l + "_a-" + a + "_s-" + s;
                        cells.push_back(std::move(cell));
                    }
                }
            }
        }
    }
    return cells;
}

AblationOutcome run_ablation(const Config& grid, const std::string& out_dir, bool resume,
                             bool emit_csv, int max_workers) {
    const std::vector<AblationCell> cells = expand_grid(grid);
    fs::create_directories(out_dir);
    const fs::path dir(out_dir);

    AblationOutcome outcome;
    for (const AblationCell& c : cells) outcome.cell_keys.push_back(c.key);

    std::vector<std::size_t> todo;
    for (std::size_t i = 0; i < cells.size(); ++i) {
        const fs::path report_path = dir / (cells[i].key + ".report");
        const fs::path done_path = dir / (cells[i].key + ".done");
        if (resume && fs::exists(report_path) && fs::exists(done_path)) {
            std::ifstream rf(report_path);
            std::stringstream ss;
            ss << rf.rdbuf();
            std::ifstream df(done_path);
            std::string stored;
            df >> stored;
            if (stored == std::to_string(fnv1a_text(ss.str()))) {
                ++outcome.cells_skipped;
                continue;
            }
        }
        todo.push_back(i);
    }

    // Cells are independent; run them on a small pool. Each cell is fully
    // deterministic and owns its files, so scheduling order cannot change
    // any output.
    unsigned workers = max_workers > 0 ? static_cast<unsigned>(max_workers)
                                       : std::max(1u, std::thread::hardware_concurrency());
    workers = std::min<unsigned>(workers, std::max<std::size_t>(todo.size(), 1));
    std::atomic<std::size_t> next{0};
    std::vector<std::string> errors(todo.size());
    auto worker = [&] {
        for (;;) {
            const std::size_t slot = next.fetch_add(1);
            if (slot >= todo.size()) return;
            const AblationCell& cell = cells[todo[slot]];
            try {
                const MetricsReport report = run_experiment(cell.config);
                const std::string text = report.to_text();
                {
                    std::ofstream out(dir / (cell.key + ".report"), std::ios::trunc);
                    out << text;
                }
                std::ofstream done(dir / (cell.key + ".done"), std::ios::trunc);
                done << fnv1a_text(text) << "\n";
            } catch (const std::exception& e) {
                errors[slot] = cell.key + ": " + e.what();
            }
        }
    };
    std::vector<std::thread> pool;
    for (unsigned i = 1; i < workers; ++i) pool.emplace_back(worker);
    worker();
    for (std::thread& t : pool) t.join();
    for (const std::string& err : errors) {
        if (!err.empty()) throw numeric_error("ablation cell failed: " + err);
    }
    outcome.cells_run = todo.size();

    // Summary: mean +/- std over seeds per cell group and attribute.
    struct Agg {
        std::map<int, std::vector<double>> acc;
        std::map<int, std::vector<double>> loss;
    };
    std::map<std::string, Agg> groups;
    for (const AblationCell& cell : cells) {
        const MetricsReport report =
            MetricsReport::load((dir / (cell.key + ".report")).string());
        Agg& agg = groups[group_of(cell.key)];
        for (const auto& [k, v] : report.entries) {
            // post.attr.<i>.accuracy / post.attr.<i>.mean_loss
            if (k.rfind("post.attr.", 0) != 0) continue;
            const std::size_t id_begin = std::string("post.attr.").size();
            const std::size_t id_end = k.find('.', id_begin);
            const int attr = std::stoi(k.substr(id_begin, id_end - id_begin));
            const std::string field = k.substr(id_end + 1);
            if (field == "accuracy") agg.acc[attr].push_back(std::stod(v));
            if (field == "mean_loss") agg.loss[attr].push_back(std::stod(v));
        }
    }

    auto mean_std = [](const std::vector<double>& xs) {
        double mean = 0.0;
        for (double x : xs) mean += x;
        mean /= static_cast<double>(xs.size());
        double var = 0.0;
        for (double x : xs) var += (x - mean) * (x - mean);
        var = xs.size() > 1 ? var / static_cast<double>(xs.size() - 1) : 0.0;
        return std::pair<double, double>(mean, std::sqrt(var));
    };

    MetricsReport summary;
    summary.put("report.kind", "ablation-summary");
    summary.put_int("cells", static_cast<long long>(cells.size()));
    std::string csv = "group,attribute,mean_accuracy,std_accuracy,mean_loss,std_loss,seeds\n";
    for (const auto& [group, agg] : groups) {
        for (const auto& [attr, accs] : agg.acc) {
            const auto [am, as] = mean_std(accs);
            const auto [lm, ls] = mean_std(agg.loss.at(attr));
            const std::string p = group + ".attr." + std::to_string(attr) + ".";
            summary.put_double(p + "accuracy_mean", am);
            summary.put_double(p + "accuracy_std", as);
            summary.put_double(p + "loss_mean", lm);
            summary.put_double(p + "loss_std", ls);
            char buf[160];
            std::snprintf(buf, sizeof buf, "%s,%d,%.6f,%.6f,%.6f,%.6f,", group.c_str(), attr, am,
                          as, lm, ls);
            csv += buf;
            csv += std::to_string(accs.size());
            csv += "\n";
        }
    }
    summary.save((dir / "summary.txt").string());
    if (emit_csv) {
        std::ofstream out(dir / "grid.csv", std::ios::trunc);
        out << csv;
    }
    return outcome;
}

} // namespace msrs
