#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "msrs/matrix.hpp"
#include "msrs/steering.hpp"
#include "msrs/toymodel.hpp"

namespace msrs {

// Synthetic multi-attribute task family with planted ground truth.
struct AttributeTaskSpec {
    int n_attributes = 2;
    int samples_per_attribute = 256;
    int seq_len = 8;
    int shared_rank = 2;
    std::vector<int> private_ranks; // empty = shared_rank's default of 2 per attribute
    double noise_sigma = 0.01;
    int label_count = 4;       // labels per attribute, mapped to disjoint vocab ids
    double mean_scale = 4.0;   // shared-coordinate magnitude of attribute means
    double coeff_scale = 3.0;  // private-coordinate sample spread
    double shared_jitter = 1.0;
    double train_fraction = 0.8;
    std::uint64_t seed = 42;
    bool make_linalg = true;
    bool make_model = true;
    ModelConfig model;
    int layer = 1;
};

struct GeneratedTasks {
    // linalg path: raw activation rows per attribute plus the planted spans
    std::vector<Matrix> linalg_samples; // per attribute: N x d
    Matrix planted_shared;              // shared_rank x d, orthonormal rows
    std::vector<Matrix> planted_private;

    // model path: token sequences labeled by a planted probe on the frozen
    // model's layer-l last-token state
    std::vector<TrainSample> train_set;
    std::vector<TrainSample> eval_set;
    std::vector<Matrix> probes; // per attribute: label_count x d
    std::vector<std::vector<int>> label_sets;
};

// Deterministic in (spec, model). Linalg samples are built as
// mean + shared jitter + private spread + gaussian noise from planted
// orthonormal bases; the jitter and spread coefficients are centered so the
// planted spans are exact when noise_sigma = 0.
GeneratedTasks generate_tasks(const AttributeTaskSpec& spec, const FrozenModel& model);

// Line-delimited dataset records: attribute id, optional token list and
// gold label (model path), optional raw activation vector (linalg path).
struct DatasetRecord {
    int attribute = 0;
    std::vector<int> tokens;
    int label = -1;
    std::vector<double> vec;
};

void save_records(const std::string& path, const std::vector<DatasetRecord>& records);
std::vector<DatasetRecord> load_records(const std::string& path);

std::vector<DatasetRecord> to_records(const std::vector<TrainSample>& samples);
std::vector<TrainSample> to_samples(const std::vector<DatasetRecord>& records);
// One N x d matrix per attribute id (0..max); every record must carry a vec.
std::vector<Matrix> records_to_activation_rows(const std::vector<DatasetRecord>& records);

} // namespace msrs
