#pragma once

#include "magekt/fusion/encode.hpp"
#include "magekt/fusion/model.hpp"
#include "magekt/metrics.hpp"

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

namespace magekt::fusion {

/// Windows turned into step inputs once; retrieval is fixed for a graph
/// version, so epochs reuse these.
struct EncodedWindows {
    std::vector<std::vector<StepInput>> steps;
    std::vector<std::vector<double>> targets;

    std::size_t predictions() const;
    bool empty() const { return steps.empty(); }
};

EncodedWindows encode_windows(const Encoder& encoder, const std::vector<ingest::Window>& windows);

struct HistoryRow {
    std::size_t epoch = 0;
    /// Mean per-prediction cross-entropy over the epoch's training passes.
    double train_loss = 0.0;
    double val_auc = 0.0;
    double val_acc = 0.0;
    std::optional<double> train_auc;

    bool operator==(const HistoryRow&) const = default;
};

struct TrainResult {
    FusionModel model;
    std::vector<HistoryRow> history;
    std::size_t best_epoch = 0;
    double best_val_auc = 0.0;
};

struct VocabSizes {
    std::size_t students = 0;
    std::size_t questions = 0;
    std::size_t kcs = 0;
};

/// Thrown when a loss or parameter turns non-finite; names the epoch and
/// batch.
class TrainingDiverged : public DomainError {
public:
    using DomainError::DomainError;
};

/// Adam over batches of windows (gradient of the batch mean of window
/// losses), validation AUC after each epoch, early stopping with patience;
/// returns the model restored to its best validation epoch (earliest on
/// ties). Deterministic for a given seed.
TrainResult train(const ModelConfig& cfg, Variant variant, const VocabSizes& vocab, const EncodedWindows& train_set,
                  const EncodedWindows& val_set, std::uint64_t seed);

/// Retrieval, encoding and training for one variant.
TrainResult train_variant(Variant variant, const ModelConfig& cfg, const RetrievalConfig& rcfg, const SqGraph& sq,
                          const KcGraph& kc, const std::vector<ingest::Window>& train_windows,
                          const std::vector<ingest::Window>& val_windows, std::uint64_t seed);

/// Predictions in window order with dropout off.
std::vector<double> predict(FusionModel& model, const EncodedWindows& data);
std::vector<int> labels(const EncodedWindows& data);
/// AUC falls back to 0.5 when only one class is present.
metrics::EvalResult evaluate(FusionModel& model, const EncodedWindows& data);

/// Delimiter-separated history with a header row.
std::vector<std::string> history_table(const std::vector<HistoryRow>& history, char delimiter = ',');

/// Metadata line, then one line per parameter.
void save_checkpoint(const std::filesystem::path& path, const FusionModel& model, const VocabSizes& vocab,
                     const std::string& extra_json = "{}");
FusionModel load_checkpoint(const std::filesystem::path& path);

}  // namespace magekt::fusion
