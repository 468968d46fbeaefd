#pragma once

// The live vs post-mortem classifier: VGG-16 topology with a replaced
// two-class tail, SGD-with-momentum fine-tuning of all layers, scoring, and
// a single-file model artifact.

#include <cstdio>
#include <cstdlib>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "pmiris/common.hpp"
#include "pmiris/dataset.hpp"
#include "pmiris/image.hpp"
#include "pmiris/nn.hpp"
#include "pmiris/preprocess.hpp"
#include "pmiris/vgg16.hpp"

namespace pmiris {

inline constexpr int kClassLive = 0;
inline constexpr int kClassPostMortem = 1;

enum class InitMode { Pretrained, Random };

struct ModelConfig {
    std::string backbone = "vgg16_imagenet";
    int num_classes = 2;
    int input_size = 64;         // spatial side fed to the backbone
    double margin_factor = 1.2;  // crop margin applied before resizing
    double dropout = 0.5;
    InitMode init = InitMode::Pretrained;
    std::string pretrained_path;  // model artifact donating backbone weights
    std::uint64_t init_seed = 1;
    NormalizationRecipe recipe;
};

struct TrainingConfig {
    double momentum = 0.9;
    double learning_rate = 1e-4;
    int batch_size = 16;
    int epochs = 10;
    std::uint64_t rng_seed = 1;
};

inline void validate(const TrainingConfig& c) {
    require(c.learning_rate > 0.0, ErrKind::Config, "learning_rate must be > 0");
    require(c.batch_size > 0, ErrKind::Config, "batch_size must be > 0");
    require(c.epochs >= 0, ErrKind::Config, "epochs must be >= 0");
    require(c.momentum >= 0.0 && c.momentum < 1.0, ErrKind::Config, "momentum must be in [0,1)");
}

struct EpochStats {
    int epoch = 0;
    double mean_loss = 0.0;
    double train_accuracy = 0.0;
};

struct LivenessScore {
    double p_live = 0.0;
    double p_post_mortem = 0.0;
    Label predicted_label = Label::PostMortem;  // argmax, ties to post_mortem
};

struct TrainedModel {
    ModelConfig config;
    TrainingConfig training_config;
    std::vector<EpochStats> history;
    Net<float> net;

    std::string normalization_tag() const { return pmiris::normalization_tag(config.recipe, config.input_size); }
};

// ---------------------------------------------------------------------------
// Config (de)serialization.
// ---------------------------------------------------------------------------

inline nlohmann::ordered_json to_json(const ModelConfig& c) {
    return nlohmann::ordered_json{{"backbone", c.backbone},
                                  {"num_classes", c.num_classes},
                                  {"input_size", c.input_size},
                                  {"margin_factor", c.margin_factor},
                                  {"dropout", c.dropout},
                                  {"init", c.init == InitMode::Pretrained ? "pretrained" : "random"},
                                  {"pretrained_path", c.pretrained_path},
                                  {"init_seed", c.init_seed},
                                  {"normalization", c.recipe.name}};
}

inline ModelConfig model_config_from_json(const nlohmann::json& j) {
    ModelConfig c;
    c.backbone = j.at("backbone").get<std::string>();
    c.num_classes = j.at("num_classes").get<int>();
    c.input_size = j.at("input_size").get<int>();
    c.margin_factor = j.at("margin_factor").get<double>();
    c.dropout = j.at("dropout").get<double>();
    c.init = j.at("init").get<std::string>() == "random" ? InitMode::Random : InitMode::Pretrained;
    c.pretrained_path = j.value("pretrained_path", "");
    c.init_seed = j.at("init_seed").get<std::uint64_t>();
    c.recipe.name = j.value("normalization", c.recipe.name);
    return c;
}

inline nlohmann::ordered_json to_json(const TrainingConfig& c) {
    return nlohmann::ordered_json{{"momentum", c.momentum},
                                  {"learning_rate", c.learning_rate},
                                  {"batch_size", c.batch_size},
                                  {"epochs", c.epochs},
                                  {"rng_seed", c.rng_seed}};
}

inline TrainingConfig training_config_from_json(const nlohmann::json& j) {
    TrainingConfig c;
    c.momentum = j.at("momentum").get<double>();
    c.learning_rate = j.at("learning_rate").get<double>();
    c.batch_size = j.at("batch_size").get<int>();
    c.epochs = j.at("epochs").get<int>();
    c.rng_seed = j.at("rng_seed").get<std::uint64_t>();
    return c;
}

// ---------------------------------------------------------------------------
// Model artifact: magic | format version | header JSON | float32 payload.
// The header records every parameter tensor (name, shape, offset) plus a
// payload hash, so truncation and bit corruption surface as integrity
// errors and topology mismatches as version errors.
// ---------------------------------------------------------------------------

inline constexpr char kModelMagic[4] = {'P', 'M', 'I', 'W'};
inline constexpr std::uint32_t kModelFormatVersion = 1;

inline void save_model(TrainedModel& model, const std::string& path) {
    auto params = model.net.params();
    nlohmann::ordered_json header;
    header["format_version"] = kModelFormatVersion;
    header["model_config"] = to_json(model.config);
    header["training_config"] = to_json(model.training_config);
    header["history"] = nlohmann::ordered_json::array();
    for (const auto& e : model.history)
        header["history"].push_back(
            {{"epoch", e.epoch}, {"mean_loss", e.mean_loss}, {"train_accuracy", e.train_accuracy}});
    header["normalization_tag"] = model.normalization_tag();

    std::vector<float> payload;
    nlohmann::ordered_json plist = nlohmann::ordered_json::array();
    for (auto& p : params) {
        nlohmann::ordered_json pj;
        pj["name"] = p.name;
        pj["shape"] = p.tensor->shape;
        pj["offset"] = payload.size();
        pj["count"] = p.tensor->count();
        plist.push_back(std::move(pj));
        payload.insert(payload.end(), p.tensor->v.begin(), p.tensor->v.end());
    }
    header["params"] = std::move(plist);
    header["payload_count"] = payload.size();
    char hash[32];
    std::snprintf(hash, sizeof(hash), "%016llx",
                  static_cast<unsigned long long>(fnv1a64_span(payload)));
    header["payload_fnv64"] = hash;

    const std::string hjson = header.dump();
    std::ofstream out(path, std::ios::binary);
    if (!out) fail(ErrKind::Io, "cannot write model artifact: " + path);
    out.write(kModelMagic, 4);
    const std::uint32_t ver = kModelFormatVersion;
    out.write(reinterpret_cast<const char*>(&ver), sizeof(ver));
    const std::uint64_t hlen = hjson.size();
    out.write(reinterpret_cast<const char*>(&hlen), sizeof(hlen));
    out.write(hjson.data(), std::streamsize(hjson.size()));
    out.write(reinterpret_cast<const char*>(payload.data()),
              std::streamsize(payload.size() * sizeof(float)));
    if (!out) fail(ErrKind::Io, "short write on model artifact: " + path);
}

inline TrainedModel load_model(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) fail(ErrKind::Io, "model artifact not found: " + path);

    char magic[4];
    if (!in.read(magic, 4) || std::memcmp(magic, kModelMagic, 4) != 0)
        fail(ErrKind::Integrity, "not a model artifact (bad magic): " + path);
    std::uint32_t ver = 0;
    if (!in.read(reinterpret_cast<char*>(&ver), sizeof(ver)))
        fail(ErrKind::Integrity, "truncated model artifact: " + path);
    if (ver != kModelFormatVersion)
        fail(ErrKind::Validation, "unsupported model artifact version " + std::to_string(ver));
    std::uint64_t hlen = 0;
    if (!in.read(reinterpret_cast<char*>(&hlen), sizeof(hlen)) || hlen == 0 || hlen > (1u << 26))
        fail(ErrKind::Integrity, "truncated model artifact header: " + path);
    std::string hjson(hlen, '\0');
    if (!in.read(hjson.data(), std::streamsize(hlen)))
        fail(ErrKind::Integrity, "truncated model artifact header: " + path);

    nlohmann::json header;
    try {
        header = nlohmann::json::parse(hjson);
    } catch (const std::exception& e) {
        fail(ErrKind::Integrity, std::string("corrupt model artifact header: ") + e.what());
    }

    TrainedModel model;
    try {
        model.config = model_config_from_json(header.at("model_config"));
        model.training_config = training_config_from_json(header.at("training_config"));
        for (const auto& e : header.value("history", nlohmann::json::array())) {
            EpochStats s;
            s.epoch = e.at("epoch").get<int>();
            s.mean_loss = e.at("mean_loss").get<double>();
            s.train_accuracy = e.at("train_accuracy").get<double>();
            model.history.push_back(s);
        }
    } catch (const Error&) {
        throw;
    } catch (const std::exception& e) {
        fail(ErrKind::Validation, std::string("model artifact header schema mismatch: ") + e.what());
    }

    require(model.config.num_classes == 2, ErrKind::Validation,
            "model artifact declares num_classes != 2");
    require(model.config.backbone == "vgg16_imagenet", ErrKind::Validation,
            "model artifact declares unknown backbone '" + model.config.backbone + "'");

    const std::uint64_t payload_count = header.at("payload_count").get<std::uint64_t>();
    std::vector<float> payload(payload_count);
    if (!in.read(reinterpret_cast<char*>(payload.data()),
                 std::streamsize(payload_count * sizeof(float))))
        fail(ErrKind::Integrity, "truncated model artifact payload: " + path);
    char trailing;
    if (in.read(&trailing, 1)) fail(ErrKind::Integrity, "trailing bytes after model payload: " + path);

    char hash[32];
    std::snprintf(hash, sizeof(hash), "%016llx",
                  static_cast<unsigned long long>(fnv1a64_span(payload)));
    if (header.at("payload_fnv64").get<std::string>() != hash)
        fail(ErrKind::Integrity, "model artifact payload hash mismatch: " + path);

    model.net = build_vgg16<float>(model.config.input_size, model.config.dropout);
    auto params = model.net.params();
    const auto& plist = header.at("params");
    if (plist.size() != params.size())
        fail(ErrKind::Validation, "model artifact parameter list does not match the topology");
    for (std::size_t i = 0; i < params.size(); ++i) {
        const auto& pj = plist[i];
        if (pj.at("name").get<std::string>() != params[i].name ||
            pj.at("shape").get<std::vector<int>>() != params[i].tensor->shape)
            fail(ErrKind::Validation, "model artifact parameter '" +
                                          pj.at("name").get<std::string>() +
                                          "' does not match the topology (version mismatch)");
        const std::uint64_t off = pj.at("offset").get<std::uint64_t>();
        const std::uint64_t cnt = pj.at("count").get<std::uint64_t>();
        if (cnt != params[i].tensor->count() || off + cnt > payload.size())
            fail(ErrKind::Integrity, "model artifact parameter '" + params[i].name +
                                         "' has an inconsistent payload span");
        std::copy(payload.begin() + std::ptrdiff_t(off), payload.begin() + std::ptrdiff_t(off + cnt),
                  params[i].tensor->v.begin());
    }
    return model;
}

// ---------------------------------------------------------------------------
// build_model: pretrained backbone when a donor artifact is available,
// otherwise an explicit random fallback; the two-class fc8 tail is always
// freshly initialized.
// ---------------------------------------------------------------------------

inline TrainedModel build_model(const ModelConfig& config) {
    require(config.num_classes == 2, ErrKind::Config, "num_classes must be 2");
    require(config.backbone == "vgg16_imagenet", ErrKind::Config,
            "unsupported backbone '" + config.backbone + "'");

    TrainedModel model;
    model.config = config;
    model.net = build_vgg16<float>(config.input_size, config.dropout);
    init_vgg16_random(model.net, config.init_seed);  // fc8 tail init also happens here

    if (config.init == InitMode::Pretrained) {
        std::string path = config.pretrained_path;
        if (path.empty())
            if (const char* env = std::getenv("PMIRIS_VGG16_WEIGHTS")) path = env;
        if (path.empty() || !std::filesystem::exists(path))
            fail(ErrKind::Environment,
                 "pretrained vgg16 backbone weights not found" +
                     (path.empty() ? std::string(" (no path configured)") : " at '" + path + "'") +
                     "; provide a donor model artifact via --pretrained or the "
                     "PMIRIS_VGG16_WEIGHTS environment variable, or select random "
                     "initialization (init=random)");
        TrainedModel donor = load_model(path);
        require(donor.config.input_size == config.input_size, ErrKind::Validation,
                "donor artifact input_size " + std::to_string(donor.config.input_size) +
                    " does not match requested " + std::to_string(config.input_size));
        auto dst = model.net.params();
        auto src = donor.net.params();
        for (std::size_t i = 0; i < dst.size(); ++i) {
            if (dst[i].name.rfind("fc8", 0) == 0) continue;  // replaced tail stays fresh
            require(src[i].name == dst[i].name && src[i].tensor->shape == dst[i].tensor->shape,
                    ErrKind::Validation, "donor artifact layer mismatch at " + dst[i].name);
            dst[i].tensor->v = src[i].tensor->v;
        }
    }
    return model;
}

// ---------------------------------------------------------------------------
// Scoring.
// ---------------------------------------------------------------------------

inline LivenessScore score_from_logits(const Tensor<float>& logits) {
    const auto probs = softmax(logits);
    LivenessScore s;
    s.p_live = double(probs[kClassLive]);
    s.p_post_mortem = double(probs[kClassPostMortem]);
    s.predicted_label = s.p_live > s.p_post_mortem ? Label::Live : Label::PostMortem;
    return s;
}

inline LivenessScore score_input(const TrainedModel& model, const NetworkInput& input) {
    require(input.size == model.config.input_size, ErrKind::Consistency,
            "network input side does not match the model input_size");
    Workspace<float> ws;  // evaluation mode: no dropout, deterministic
    Tensor<float> x({3, input.size, input.size});
    x.v.assign(input.chw.begin(), input.chw.end());
    const Tensor<float>& logits = model.net.forward(x, ws);
    return score_from_logits(logits);
}

inline NetworkInput preprocess_record(const TrainedModel& model, const Image& image,
                                      const IrisAnnotation& ann) {
    Image cm = crop_and_mask(image, ann, model.config.margin_factor);
    return prepare_for_network(cm, model.config.input_size, model.config.recipe);
}

inline LivenessScore predict(const TrainedModel& model, const Image& image, const IrisAnnotation& ann) {
    return score_input(model, preprocess_record(model, image, ann));
}

inline std::vector<LivenessScore> score_dataset(const TrainedModel& model, const Dataset& ds) {
    std::vector<LivenessScore> out;
    out.reserve(ds.records.size());
    for (const auto& r : ds.records) {
        Image im = load_image_gray(r.image_path);
        out.push_back(predict(model, im, r.annotation));
    }
    return out;
}

// ---------------------------------------------------------------------------
// Training: SGD with momentum over shuffled mini-batches, all layers
// trainable, per-epoch progress lines "epoch,mean_loss,train_accuracy".
// ---------------------------------------------------------------------------

inline void train(TrainedModel& model, const Dataset& train_set, const TrainingConfig& tcfg,
                  std::ostream* progress = nullptr) {
    validate(tcfg);
    model.training_config = tcfg;
    if (tcfg.epochs == 0) return;  // explicit no-op

    bool has_live = false, has_pm = false;
    for (const auto& r : train_set.records) (r.label == Label::Live ? has_live : has_pm) = true;
    require(has_live && has_pm, ErrKind::Config,
            "training set must contain both live and post_mortem samples");

    // Preprocess once; the whole train set lives in memory as input tensors.
    struct Prepared {
        Tensor<float> x;
        int label;
    };
    std::vector<Prepared> data;
    data.reserve(train_set.records.size());
    for (const auto& r : train_set.records) {
        Image im = load_image_gray(r.image_path);
        NetworkInput in = preprocess_record(model, im, r.annotation);
        Prepared p;
        p.x.shape = {3, in.size, in.size};
        p.x.v.assign(in.chw.begin(), in.chw.end());
        p.label = r.label == Label::Live ? kClassLive : kClassPostMortem;
        data.push_back(std::move(p));
    }

    auto params = model.net.params();
    SgdMomentum<float> sgd(float(tcfg.learning_rate), float(tcfg.momentum));
    GradStore<float> gs;
    Workspace<float> ws;
    Rng base(tcfg.rng_seed);

    std::vector<std::size_t> order(data.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;

    const int start_epoch = model.history.empty() ? 1 : model.history.back().epoch + 1;
    for (int e = 0; e < tcfg.epochs; ++e) {
        Rng shuffle_rng = base.derive(0x5045ull + std::uint64_t(e));
        Rng dropout_rng = base.derive(0xD0ull + std::uint64_t(e));
        shuffle_rng.shuffle(order);

        double loss_sum = 0.0;
        std::size_t correct = 0;
        const std::size_t n_batches = (data.size() + tcfg.batch_size - 1) / tcfg.batch_size;
        for (std::size_t b = 0; b < n_batches; ++b) {
            const std::size_t lo = b * std::size_t(tcfg.batch_size);
            const std::size_t hi = std::min(lo + std::size_t(tcfg.batch_size), data.size());
            gs.zero();
            ws.flags.training = true;
            ws.flags.dropout_rng = &dropout_rng;
            ws.flags.relu_mode = ReluBackwardMode::Standard;
            for (std::size_t s = lo; s < hi; ++s) {
                const Prepared& sample = data[order[s]];
                const Tensor<float>& logits = model.net.forward(sample.x, ws);
                const auto probs = softmax(logits);
                const float loss = cross_entropy(probs, sample.label);
                if (!std::isfinite(loss))
                    fail(ErrKind::Divergence, "non-finite loss at epoch " +
                                                  std::to_string(start_epoch + e) + ", batch " +
                                                  std::to_string(b + 1));
                loss_sum += double(loss);
                const int pred = probs[kClassLive] > probs[kClassPostMortem] ? kClassLive
                                                                             : kClassPostMortem;
                if (pred == sample.label) ++correct;
                Tensor<float> dlogits = cross_entropy_grad(probs, sample.label);
                model.net.backward(dlogits, ws, &gs, -1, /*want_input_grad=*/false);
            }
            sgd.step(params, gs, 1.0f / float(hi - lo));
        }

        EpochStats st;
        st.epoch = start_epoch + e;
        st.mean_loss = loss_sum / double(data.size());
        st.train_accuracy = double(correct) / double(data.size());
        model.history.push_back(st);
        if (progress) {
            char line[96];
            std::snprintf(line, sizeof(line), "%d,%.6f,%.4f", st.epoch, st.mean_loss,
                          st.train_accuracy);
            (*progress) << line << "\n" << std::flush;
        }
    }
}

}  // namespace pmiris
