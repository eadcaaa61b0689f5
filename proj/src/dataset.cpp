#include "msrs/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <sstream>

#include "msrs/errors.hpp"
#include "msrs/kernels.hpp"
#include "msrs/rng.hpp"

namespace msrs {

namespace {

void validate_spec(const AttributeTaskSpec& spec, const std::vector<int>& private_ranks) {
    if (spec.n_attributes < 1 || spec.samples_per_attribute < 1 || spec.seq_len < 1 ||
        spec.shared_rank < 1 || spec.label_count < 1) {
        throw config_error("generate_tasks: all counts must be >= 1");
    }
    if (spec.noise_sigma < 0.0) throw config_error("generate_tasks: negative noise_sigma");
    if (!(spec.train_fraction > 0.0) || spec.train_fraction > 1.0) {
        throw config_error("generate_tasks: train_fraction must be in (0, 1]");
    }
    if (spec.seq_len > spec.model.max_seq_len) {
        throw config_error("generate_tasks: seq_len exceeds max_seq_len");
    }
    if (spec.layer < 0 || spec.layer >= spec.model.n_layers) {
        throw config_error("generate_tasks: layer out of range");
    }
    int total = spec.shared_rank;
    for (int r : private_ranks) {
        if (r < 1) throw config_error("generate_tasks: private ranks must be >= 1");
        total += r;
    }
    if (total > spec.model.d_model) {
        throw config_error("generate_tasks: planted ranks exceed d (" + std::to_string(total) +
                           " > " + std::to_string(spec.model.d_model) + ")");
    }
    if (spec.label_count * spec.n_attributes > spec.model.vocab_size) {
        throw config_error("generate_tasks: label sets do not fit in the vocabulary");
    }
}

// Orthonormal rows from seeded gaussians (modified Gram-Schmidt).
Matrix random_orthonormal_rows(Rng& rng, std::size_t rows, std::size_t cols) {
    Matrix out(rows, cols);
    for (std::size_t r = 0; r < rows; ++r) {
        std::vector<double> w(cols);
        for (double& x : w) x = rng.gaussian();
        for (std::size_t p = 0; p < r; ++p) {
            const double proj = kernels::dot(w.data(), out.data() + p * cols, cols);
            kernels::active().axpy(-proj, out.data() + p * cols, w.data(), cols);
        }
        const double norm = std::sqrt(kernels::sum_squares(w.data(), cols));
        if (norm <= 1e-10) throw numeric_error("generate_tasks: degenerate planted basis");
        for (std::size_t c = 0; c < cols; ++c) out(r, c) = w[c] / norm;
    }
    return out;
}

// N x k coefficients with exactly zero column means, so sample means carry
// no leaked component along these directions.
Matrix centered_coefficients(Rng& rng, std::size_t n, std::size_t k, double scal) {
    Matrix c(n, k);
    for (std::size_t i = 0; i < c.size(); ++i) c.data()[i] = rng.gaussian() * scal;
    for (std::size_t j = 0; j < k; ++j) {
        double mean = 0.0;
        for (std::size_t i = 0; i < n; ++i) mean += c(i, j);
        mean /= static_cast<double>(n);
        for (std::size_t i = 0; i < n; ++i) c(i, j) -= mean;
    }
    return c;
}

// Mean coefficients in the shared coordinates: a DCT-II pattern, rows
// normalized, so the concatenated means have a flat spectrum and the energy
// rule lands on the planted shared rank for any attribute count >= rank.
Matrix mean_pattern(std::size_t shared_rank, std::size_t n_attributes, double scal) {
    Matrix a(shared_rank, n_attributes);
    for (std::size_t k = 0; k < shared_rank; ++k) {
        for (std::size_t i = 0; i < n_attributes; ++i) {
            a(k, i) = std::cos(M_PI * (2.0 * static_cast<double>(i) + 1.0) *
                               static_cast<double>(k) / (2.0 * static_cast<double>(n_attributes)));
        }
        const double norm = std::sqrt(kernels::sum_squares(a.data() + k * n_attributes,
                                                           n_attributes));
        for (std::size_t i = 0; i < n_attributes; ++i) a(k, i) *= scal / norm;
    }
    return a;
}

} // namespace

GeneratedTasks generate_tasks(const AttributeTaskSpec& spec, const FrozenModel& model) {
    std::vector<int> private_ranks = spec.private_ranks;
    if (private_ranks.empty()) private_ranks.assign(static_cast<std::size_t>(spec.n_attributes), 2);
    if (private_ranks.size() != static_cast<std::size_t>(spec.n_attributes)) {
        throw config_error("generate_tasks: one private rank per attribute");
    }
    validate_spec(spec, private_ranks);

    const auto d = static_cast<std::size_t>(spec.model.d_model);
    const auto n_attr = static_cast<std::size_t>(spec.n_attributes);
    const auto n_samples = static_cast<std::size_t>(spec.samples_per_attribute);
    const auto r_sh = static_cast<std::size_t>(spec.shared_rank);

    Rng rng(spec.seed);
    GeneratedTasks out;

    std::size_t r_total = r_sh;
    for (int r : private_ranks) r_total += static_cast<std::size_t>(r);
    const Matrix directions = random_orthonormal_rows(rng, r_total, d);

    out.planted_shared = Matrix(r_sh, d);
    for (std::size_t r = 0; r < r_sh; ++r) {
        for (std::size_t c = 0; c < d; ++c) out.planted_shared(r, c) = directions(r, c);
    }
    std::size_t dir_at = r_sh;
    for (std::size_t i = 0; i < n_attr; ++i) {
        const auto ri = static_cast<std::size_t>(private_ranks[i]);
        Matrix p(ri, d);
        for (std::size_t r = 0; r < ri; ++r) {
            for (std::size_t c = 0; c < d; ++c) p(r, c) = directions(dir_at + r, c);
        }
        dir_at += ri;
        out.planted_private.push_back(std::move(p));
    }

    if (spec.make_linalg) {
        const Matrix means = mean_pattern(r_sh, n_attr, spec.mean_scale);
        for (std::size_t i = 0; i < n_attr; ++i) {
            const Matrix c_shared = centered_coefficients(rng, n_samples, r_sh, spec.shared_jitter);
            const Matrix c_priv = centered_coefficients(
                rng, n_samples, static_cast<std::size_t>(private_ranks[i]), spec.coeff_scale);
            Matrix rows(n_samples, d);
            for (std::size_t j = 0; j < n_samples; ++j) {
                double* row = rows.data() + j * d;
                for (std::size_t k = 0; k < r_sh; ++k) {
                    kernels::active().axpy(means(k, i) + c_shared(j, k),
                                           out.planted_shared.data() + k * d, row, d);
                }
                const Matrix& priv = out.planted_private[i];
                for (std::size_t k = 0; k < priv.rows(); ++k) {
                    kernels::active().axpy(c_priv(j, k), priv.data() + k * d, row, d);
                }
                if (spec.noise_sigma > 0.0) {
                    for (std::size_t c = 0; c < d; ++c) {
                        row[c] += rng.gaussian() * spec.noise_sigma;
                    }
                }
            }
            out.linalg_samples.push_back(std::move(rows));
        }
    }

    if (spec.make_model) {
        for (std::size_t i = 0; i < n_attr; ++i) {
            std::vector<int> labels(static_cast<std::size_t>(spec.label_count));
            std::iota(labels.begin(), labels.end(),
                      static_cast<int>(i) * spec.label_count);
            out.label_sets.push_back(labels);
        }

        for (std::size_t i = 0; i < n_attr; ++i) {
            // token sequences and their layer-l last-token states
            std::vector<std::vector<int>> token_pool(n_samples);
            Matrix states(n_samples, d);
            for (std::size_t j = 0; j < n_samples; ++j) {
                token_pool[j].resize(static_cast<std::size_t>(spec.seq_len));
                for (int& t : token_pool[j]) {
                    t = static_cast<int>(rng.below(static_cast<std::uint64_t>(
                        spec.model.vocab_size)));
                }
                const auto [logits, cap] = model.forward_capture(token_pool[j], spec.layer);
                const std::size_t last = cap.states.rows() - 1;
                for (std::size_t c = 0; c < d; ++c) states(j, c) = cap.states(last, c);
            }

            // Affine probe: gaussian rows plus a bias that centers each row's
            // score over the pool, so the argmax labels come out balanced
            // instead of collapsing onto whichever row aligns with the mean
            // activation. Stored as label_count x (d+1), bias last.
            Matrix probe(static_cast<std::size_t>(spec.label_count), d + 1);
            for (std::size_t k = 0; k < probe.rows(); ++k) {
                for (std::size_t c = 0; c < d; ++c) probe(k, c) = rng.gaussian();
                double mean_score = 0.0;
                for (std::size_t j = 0; j < n_samples; ++j) {
                    mean_score += kernels::dot(probe.data() + k * (d + 1),
                                               states.data() + j * d, d);
                }
                probe(k, d) = -mean_score / static_cast<double>(n_samples);
            }

            std::vector<TrainSample> pool;
            for (std::size_t j = 0; j < n_samples; ++j) {
                TrainSample s;
                s.attribute = static_cast<int>(i);
                s.tokens = token_pool[j];
                std::size_t best = 0;
                double best_v = 0.0;
                for (std::size_t k = 0; k < probe.rows(); ++k) {
                    const double v = probe(k, d) + kernels::dot(probe.data() + k * (d + 1),
                                                                states.data() + j * d, d);
                    if (k == 0 || v > best_v) {
                        best_v = v;
                        best = k;
                    }
                }
                s.label = out.label_sets[i][best];
                pool.push_back(std::move(s));
            }
            out.probes.push_back(std::move(probe));

            std::vector<std::size_t> order(pool.size());
            std::iota(order.begin(), order.end(), 0);
            rng.shuffle(order);
            std::size_t train_count = static_cast<std::size_t>(
                std::floor(spec.train_fraction * static_cast<double>(pool.size())));
            train_count = std::max<std::size_t>(1, std::min(train_count, pool.size()));
            for (std::size_t j = 0; j < pool.size(); ++j) {
                auto& dst = j < train_count ? out.train_set : out.eval_set;
                dst.push_back(pool[order[j]]);
            }
        }
    }
    return out;
}

void save_records(const std::string& path, const std::vector<DatasetRecord>& records) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw io_error("cannot open for writing: " + path);
    char buf[32];
    for (const DatasetRecord& r : records) {
        out << "attr=" << r.attribute;
        if (!r.tokens.empty()) {
            out << " tokens=";
            for (std::size_t i = 0; i < r.tokens.size(); ++i) {
                if (i > 0) out << ',';
                out << r.tokens[i];
            }
        }
        if (r.label >= 0) out << " label=" << r.label;
        if (!r.vec.empty()) {
            out << " vec=";
            for (std::size_t i = 0; i < r.vec.size(); ++i) {
                if (i > 0) out << ',';
                std::snprintf(buf, sizeof buf, "%.17g", r.vec[i]);
                out << buf;
            }
        }
        out << '\n';
    }
    if (!out) throw io_error("write failed: " + path);
}

std::vector<DatasetRecord> load_records(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw io_error("cannot open: " + path);
    std::vector<DatasetRecord> records;
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty()) continue;
        DatasetRecord r;
        bool have_attr = false;
        std::istringstream fields(line);
        std::string field;
        while (fields >> field) {
            const std::size_t eq = field.find('=');
            if (eq == std::string::npos) {
                throw io_error(path + ":" + std::to_string(lineno) + ": malformed field '" +
                               field + "'");
            }
            const std::string key = field.substr(0, eq);
            const std::string value = field.substr(eq + 1);
            if (key == "attr") {
                r.attribute = std::stoi(value);
                have_attr = true;
            } else if (key == "label") {
                r.label = std::stoi(value);
            } else if (key == "tokens" || key == "vec") {
                std::istringstream items(value);
                std::string item;
                while (std::getline(items, item, ',')) {
                    if (key == "tokens") {
                        r.tokens.push_back(std::stoi(item));
                    } else {
                        char* end = nullptr;
                        const double v = std::strtod(item.c_str(), &end);
                        if (end == item.c_str() || *end != '\0') {
                            throw io_error(path + ":" + std::to_string(lineno) +
                                           ": bad number '" + item + "'");
                        }
                        r.vec.push_back(v);
                    }
                }
            } else {
                throw io_error(path + ":" + std::to_string(lineno) + ": unknown field '" + key +
                               "'");
            }
        }
        if (!have_attr) {
            throw io_error(path + ":" + std::to_string(lineno) + ": missing attr field");
        }
        records.push_back(std::move(r));
    }
    return records;
}

std::vector<DatasetRecord> to_records(const std::vector<TrainSample>& samples) {
    std::vector<DatasetRecord> out;
    out.reserve(samples.size());
    for (const TrainSample& s : samples) {
        DatasetRecord r;
        r.attribute = s.attribute;
        r.tokens = s.tokens;
        r.label = s.label;
        out.push_back(std::move(r));
    }
    return out;
}

std::vector<TrainSample> to_samples(const std::vector<DatasetRecord>& records) {
    std::vector<TrainSample> out;
    out.reserve(records.size());
    for (const DatasetRecord& r : records) {
        if (r.tokens.empty() || r.label < 0) {
            throw io_error("dataset record is missing tokens or label");
        }
        TrainSample s;
        s.attribute = r.attribute;
        s.tokens = r.tokens;
        s.label = r.label;
        out.push_back(std::move(s));
    }
    return out;
}

std::vector<Matrix> records_to_activation_rows(const std::vector<DatasetRecord>& records) {
    int max_attr = -1;
    for (const DatasetRecord& r : records) {
        if (r.vec.empty()) throw io_error("dataset record is missing the activation vector");
        max_attr = std::max(max_attr, r.attribute);
    }
    if (max_attr < 0) throw io_error("no activation records");
    const std::size_t d = records[0].vec.size();

    std::vector<std::vector<const DatasetRecord*>> grouped(
        static_cast<std::size_t>(max_attr) + 1);
    for (const DatasetRecord& r : records) {
        if (r.vec.size() != d) throw io_error("activation vector width mismatch");
        grouped[static_cast<std::size_t>(r.attribute)].push_back(&r);
    }
    std::vector<Matrix> out;
    for (const auto& group : grouped) {
        Matrix m(group.size(), d);
        for (std::size_t j = 0; j < group.size(); ++j) {
            for (std::size_t c = 0; c < d; ++c) m(j, c) = group[j]->vec[c];
        }
        out.push_back(std::move(m));
    }
    return out;
}

} // namespace msrs
