#include "magekt/fusion/train.hpp"

#include "magekt/diff/optim.hpp"
#include "magekt/jsonl.hpp"

#include <cmath>
#include <fstream>
#include <numeric>
#include <stdexcept>

namespace magekt::fusion {

std::size_t EncodedWindows::predictions() const {
    std::size_t n = 0;
    for (const auto& t : targets) n += t.size();
    return n;
}

EncodedWindows encode_windows(const Encoder& encoder, const std::vector<ingest::Window>& windows) {
    EncodedWindows out;
    for (const auto& w : windows) {
        if (w.items.size() < 2) continue;
        out.steps.push_back(encoder.encode_window(w));
        std::vector<double> t;
        for (std::size_t i = 1; i < w.items.size(); ++i) t.push_back(static_cast<double>(w.items[i].correct));
        out.targets.push_back(std::move(t));
    }
    return out;
}

std::vector<double> predict(FusionModel& model, const EncodedWindows& data) {
    std::vector<double> out;
    out.reserve(data.predictions());
    for (std::size_t w = 0; w < data.steps.size(); ++w) {
        diff::Tape tape;
        model.window_loss(tape, data.steps[w], data.targets[w], &out);
    }
    return out;
}

std::vector<int> labels(const EncodedWindows& data) {
    std::vector<int> out;
    for (const auto& t : data.targets) {
        for (double v : t) out.push_back(static_cast<int>(v));
    }
    return out;
}

metrics::EvalResult evaluate(FusionModel& model, const EncodedWindows& data) {
    const auto scores = predict(model, data);
    const auto y = labels(data);
    metrics::EvalResult r;
    r.n = y.size();
    r.acc = metrics::acc(y, scores);
    try {
        r.auc = metrics::auc(y, scores);
    } catch (const std::invalid_argument&) {
        r.auc = 0.5;
    }
    return r;
}

TrainResult train(const ModelConfig& cfg, Variant variant, const VocabSizes& vocab, const EncodedWindows& train_set,
                  const EncodedWindows& val_set, std::uint64_t seed) {
    if (train_set.empty()) throw DomainError("train: empty training split");
    if (val_set.empty()) throw DomainError("train: empty validation split");
    TrainResult result{FusionModel(cfg, variant, vocab.students, vocab.questions, vocab.kcs, seed), {}, 0, -1.0};
    FusionModel& model = result.model;
    const auto params = model.parameters();
    diff::AdamConfig acfg;
    acfg.lr = cfg.lr;
    acfg.weight_decay = cfg.weight_decay;
    auto adam = diff::make_adam_state(params, acfg);
    for (auto* p : params) p->zero_grad();

    std::vector<diff::Tensor> best = model.snapshot();
    std::vector<std::size_t> order(train_set.steps.size());
    for (std::size_t epoch = 1; epoch <= cfg.max_epochs; ++epoch) {
        std::iota(order.begin(), order.end(), std::size_t{0});
        Rng(hash_combine(seed, hash_combine(0xe90c, epoch))).shuffle(order);
        double loss_total = 0.0;
        std::size_t n_pred = 0;
        for (std::size_t start = 0, batch = 0; start < order.size(); start += cfg.batch, ++batch) {
            const std::size_t end = std::min(order.size(), start + cfg.batch);
            const double weight = 1.0 / static_cast<double>(end - start);
            try {
                for (std::size_t i = start; i < end; ++i) {
                    const std::size_t w = order[i];
                    diff::Tape tape;
                    tape.dropout() = {true, hash_combine(hash_combine(seed, epoch), hash_combine(batch, i - start)), 0};
                    const auto loss = model.window_loss(tape, train_set.steps[w], train_set.targets[w]);
                    tape.backward(loss, weight);
                    loss_total += loss.value().item();
                    n_pred += train_set.targets[w].size();
                }
                diff::adam_step(params, adam);
            } catch (const DomainError& e) {
                throw TrainingDiverged("training diverged at epoch " + std::to_string(epoch) + ", batch " +
                                       std::to_string(batch) + ": " + e.what());
            }
            for (auto* p : params) p->zero_grad();
        }

        HistoryRow row;
        row.epoch = epoch;
        row.train_loss = loss_total / static_cast<double>(n_pred);
        const auto val = evaluate(model, val_set);
        row.val_auc = val.auc;
        row.val_acc = val.acc;
        if (cfg.eval_train) row.train_auc = evaluate(model, train_set).auc;
        result.history.push_back(row);

        if (row.val_auc > result.best_val_auc) {
            result.best_val_auc = row.val_auc;
            result.best_epoch = epoch;
            best = model.snapshot();
        } else if (epoch - result.best_epoch >= cfg.patience) {
            break;
        }
    }
    model.restore(best);
    return result;
}

TrainResult train_variant(Variant variant, const ModelConfig& cfg, const RetrievalConfig& rcfg, const SqGraph& sq,
                          const KcGraph& kc, const std::vector<ingest::Window>& train_windows,
                          const std::vector<ingest::Window>& val_windows, std::uint64_t seed) {
    const Encoder enc(sq, kc, rcfg, variant);
    const auto tr = encode_windows(enc, train_windows);
    const auto va = encode_windows(enc, val_windows);
    return train(cfg, variant, {enc.students(), enc.questions(), enc.kcs()}, tr, va, seed);
}

std::vector<std::string> history_table(const std::vector<HistoryRow>& history, char delimiter) {
    const std::string d(1, delimiter);
    std::vector<std::string> out{"epoch" + d + "train_loss" + d + "val_auc" + d + "val_acc" + d + "train_auc"};
    for (const auto& r : history) {
        out.push_back(std::to_string(r.epoch) + d + jsonl::format_double(r.train_loss) + d +
                      jsonl::format_double(r.val_auc) + d + jsonl::format_double(r.val_acc) + d +
                      (r.train_auc ? jsonl::format_double(*r.train_auc) : std::string()));
    }
    return out;
}

namespace {

nlohmann::json config_json(const ModelConfig& c) {
    return {{"embed_dim", c.embed_dim}, {"attn_heads", c.attn_heads}, {"attn_layers", c.attn_layers},
            {"gru_hidden", c.gru_hidden}, {"ffn_mult", c.ffn_mult},     {"dropout", c.dropout},
            {"batch", c.batch},           {"max_epochs", c.max_epochs}, {"patience", c.patience},
            {"seeds", c.seeds},           {"lr", c.lr},                 {"weight_decay", c.weight_decay},
            {"eval_train", c.eval_train}};
}

ModelConfig config_from(const nlohmann::json& j) {
    ModelConfig c;
    c.embed_dim = j.at("embed_dim");
    c.attn_heads = j.at("attn_heads");
    c.attn_layers = j.at("attn_layers");
    c.gru_hidden = j.at("gru_hidden");
    c.ffn_mult = j.at("ffn_mult");
    c.dropout = j.at("dropout");
    c.batch = j.at("batch");
    c.max_epochs = j.at("max_epochs");
    c.patience = j.at("patience");
    c.seeds = j.at("seeds");
    c.lr = j.at("lr");
    c.weight_decay = j.at("weight_decay");
    c.eval_train = j.at("eval_train");
    return c;
}

}  // namespace

void save_checkpoint(const std::filesystem::path& path, const FusionModel& model, const VocabSizes& vocab,
                     const std::string& extra_json) {
    std::ofstream out(path);
    if (!out) throw DomainError("cannot write checkpoint " + path.string());
    out << jsonl::LineWriter()
               .field("kind", "meta")
               .field("variant", std::string(to_string(model.variant())))
               .raw("config", config_json(model.config()).dump())
               .field("students", vocab.students)
               .field("questions", vocab.questions)
               .field("kcs", vocab.kcs)
               .raw("extra", extra_json)
               .str()
        << '\n';
    diff::save_parameters(out, model.parameters());
}

FusionModel load_checkpoint(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw DomainError("cannot read checkpoint " + path.string());
    std::string first;
    std::getline(in, first);
    const auto meta = nlohmann::json::parse(first);
    if (meta.value("kind", "") != "meta") throw DomainError("checkpoint " + path.string() + " lacks a meta row");
    FusionModel model(config_from(meta.at("config")), variant_from_string(meta.at("variant").get<std::string>()),
                      meta.at("students"), meta.at("questions"), meta.at("kcs"), 0);
    diff::load_parameters(in, model.parameters());
    return model;
}

}  // namespace magekt::fusion
