#include <catch2/catch_amalgamated.hpp>

#include "stylefuse/trainer.hpp"
#include "toy_setup.hpp"

#include <filesystem>

using namespace stylefuse;
using namespace sftest;

TEST_CASE("train config validation") {
    TrainConfig cfg;
    cfg.validate();
    SECTION("mix must sum to one") {
        cfg.task_mix = {0.5, 0.4, 0.2};
        REQUIRE_THROWS_AS(cfg.validate(), ConfigError);
    }
    SECTION("t_id fraction in (0,1)") {
        cfg.t_id_max_frac = 1.0;
        REQUIRE_THROWS_AS(cfg.validate(), ConfigError);
    }
    SECTION("positive rates") {
        cfg.phase2_lr_lora = 0.0;
        REQUIRE_THROWS_AS(cfg.validate(), ConfigError);
    }
    SECTION("defaults carry the published hyperparameters") {
        REQUIRE(cfg.phase1_steps == 1200);
        REQUIRE(cfg.phase1_lr_embeddings == 5e-4);
        REQUIRE(cfg.phase2_steps == 1500);
        REQUIRE(cfg.phase2_lr_lora == 1e-4);
        REQUIRE(cfg.phase2_lr_embeddings == 1e-5);
        REQUIRE(cfg.batch_size == 1);
        REQUIRE(cfg.grad_accum == 4);
        REQUIRE(cfg.prompt_templates.size() >= 8);
    }
}

TEST_CASE("task sampler") {
    TrainConfig cfg;
    cfg.prompt_templates = default_composed_templates();

    SECTION("phase 1 never samples the composed task") {
        Rng rng(1);
        for (int i = 0; i < 10000; ++i) {
            auto s = sample_task(1, cfg, 2, 2, rng);
            REQUIRE(s.kind != TaskKind::Composed);
        }
    }
    SECTION("degenerate mix yields only source tasks") {
        cfg.task_mix = {1.0, 0.0, 0.0};
        Rng rng(2);
        for (int i = 0; i < 1000; ++i)
            REQUIRE(sample_task(2, cfg, 2, 2, rng).kind == TaskKind::Source);
    }
    SECTION("template draws are uniform within 3 sigma") {
        Rng rng(3);
        size_t k = cfg.prompt_templates.size();
        std::vector<int> counts(k, 0);
        int n_composed = 0;
        for (int i = 0; i < 100000 && n_composed < 10000; ++i) {
            auto s = sample_task(2, cfg, 2, 2, rng);
            if (s.kind == TaskKind::Composed) {
                counts[static_cast<size_t>(s.template_index)]++;
                ++n_composed;
            }
        }
        REQUIRE(n_composed == 10000);
        double expect = 10000.0 / k;
        double sigma  = std::sqrt(expect * (1.0 - 1.0 / k));
        for (size_t i = 0; i < k; ++i)
            REQUIRE(std::abs(counts[i] - expect) < 3.0 * sigma);
        // chi-square against the uniform draw, 7 dof at alpha ~ 0.001
        double chi2 = 0.0;
        for (size_t i = 0; i < k; ++i)
            chi2 += (counts[i] - expect) * (counts[i] - expect) / expect;
        REQUIRE(chi2 < 24.3);
    }
    SECTION("empty template list with composed enabled is a config error") {
        cfg.prompt_templates.clear();
        Rng rng(4);
        REQUIRE_THROWS_AS(sample_task(2, cfg, 2, 2, rng), ConfigError);
    }
    SECTION("t_id sampler bounds over 10k draws") {
        Rng rng(5);
        int T = 100, Tp = static_cast<int>(0.6 * T);
        int lo = T, hi = 0;
        for (int i = 0; i < 10000; ++i) {
            int t = rng.uniform_int(1, Tp);
            lo    = std::min(lo, t);
            hi    = std::max(hi, t);
        }
        REQUIRE(lo >= 1);
        REQUIRE(hi <= Tp);
        REQUIRE(lo == 1);   // both ends actually reached
        REQUIRE(hi == Tp);
    }
}

TEST_CASE("zero-step phases leave the checkpoint identical to init") {
    auto setup = make_toy_setup(16, 2);
    auto b     = make_registered_backend(setup);
    Tensor e_src = b.concept_embedding("source")->value;
    Tensor e_ref = b.concept_embedding("reference")->value;

    Trainer t(b, quick_train_config(0, 0), setup.source, setup.reference, setup.identity);
    t.run_phase1();
    REQUIRE(bit_equal(b.concept_embedding("source")->value, e_src));
    REQUIRE(bit_equal(b.concept_embedding("reference")->value, e_ref));
    t.run_phase2();
    REQUIRE(bit_equal(b.concept_embedding("source")->value, e_src));
    for (auto& a : t.adapters()) REQUIRE(a->U->value.abs_max() == 0.0);
}

TEST_CASE("phase 1 trains embeddings only and the loss trends down") {
    auto setup = make_toy_setup(16, 2);
    auto b     = make_registered_backend(setup);
    uint64_t frozen = b.base_param_hash();
    Tensor e_before = b.concept_embedding("source")->value;

    auto cfg = quick_train_config(60, 0);
    Trainer t(b, cfg, setup.source, setup.reference, setup.identity);
    t.run_phase1();  // internal freeze check would throw on violation

    REQUIRE(b.base_param_hash() == frozen);
    REQUIRE_FALSE(bit_equal(b.concept_embedding("source")->value, e_before));
    REQUIRE(b.projections().adapters().empty());

    // averaged source-task loss over the last third is below the first third
    std::vector<double> src_losses;
    for (const auto& m : t.history())
        if (m.task == "source") src_losses.push_back(m.terms.at("mask"));
    REQUIRE(src_losses.size() > 20);
    size_t third = src_losses.size() / 3;
    double first = 0, last = 0;
    for (size_t i = 0; i < third; ++i) first += src_losses[i];
    for (size_t i = src_losses.size() - third; i < src_losses.size(); ++i) last += src_losses[i];
    REQUIRE(last < first);
}

TEST_CASE("phase 1 refuses an unfrozen backbone") {
    auto setup = make_toy_setup(16, 2);
    auto b     = make_registered_backend(setup);
    Rng rng(9);
    attach_lora(b.projections(), {}, 2, rng);
    Trainer t(b, quick_train_config(5, 0), setup.source, setup.reference, setup.identity);
    REQUIRE_THROWS_AS(t.run_phase1(), StateError);
}

TEST_CASE("phase 2 trains exactly embeddings plus adapters") {
    auto setup = make_toy_setup(16, 2);
    auto b     = make_registered_backend(setup);
    uint64_t frozen = b.base_param_hash();

    auto cfg = quick_train_config(20, 30);
    Trainer t(b, cfg, setup.source, setup.reference, setup.identity);
    t.run_phase1();
    Tensor e_after_p1 = b.concept_embedding("source")->value;
    t.run_phase2();

    REQUIRE(b.base_param_hash() == frozen);
    REQUIRE(t.adapters().size() == 8);
    bool lora_moved = false;
    for (auto& a : t.adapters()) lora_moved = lora_moved || a->U->value.abs_max() > 0.0;
    REQUIRE(lora_moved);
    REQUIRE_FALSE(bit_equal(b.concept_embedding("source")->value, e_after_p1));

    SECTION("AR runs for tasks of both concepts") {
        bool src_attn = false, ref_attn = false, comp_attn = false;
        for (const auto& m : t.history()) {
            if (m.phase != 2) continue;
            REQUIRE(m.terms.count("attn") == 1);  // active on every phase-2 task
            if (m.task == "source") src_attn = true;
            if (m.task == "reference") ref_attn = true;
            if (m.task == "composed") comp_attn = true;
        }
        REQUIRE(src_attn);
        REQUIRE(ref_attn);
        REQUIRE(comp_attn);
    }
    SECTION("phase 1 never evaluates AR or identity") {
        for (const auto& m : t.history()) {
            if (m.phase != 1) continue;
            REQUIRE(m.terms.count("attn") == 0);
            REQUIRE(m.terms.count("id") == 0);
        }
    }
    SECTION("t_id stays within the configured bound") {
        int T = b.schedule().timesteps();
        int Tp = static_cast<int>(cfg.t_id_max_frac * T);
        for (const auto& m : t.history())
            if (m.t_id >= 0) {
                REQUIRE(m.t_id >= 1);
                REQUIRE(m.t_id <= Tp);
            }
    }
}

TEST_CASE("two identically seeded runs are bit-identical") {
    auto run = [] {
        auto setup = make_toy_setup(16, 2);
        auto b     = make_registered_backend(setup);
        Trainer t(b, quick_train_config(12, 12, 77), setup.source, setup.reference, setup.identity);
        t.run_phase1();
        t.run_phase2();
        struct Out {
            std::vector<double> losses;
            Tensor e_src, e_ref;
            std::vector<Tensor> lora;
        } out;
        for (const auto& m : t.history()) out.losses.push_back(m.total);
        out.e_src = b.concept_embedding("source")->value;
        out.e_ref = b.concept_embedding("reference")->value;
        for (auto& a : t.adapters()) {
            out.lora.push_back(a->U->value);
            out.lora.push_back(a->V->value);
        }
        return out;
    };
    auto a = run();
    auto c = run();
    REQUIRE(a.losses == c.losses);
    REQUIRE(bit_equal(a.e_src, c.e_src));
    REQUIRE(bit_equal(a.e_ref, c.e_ref));
    REQUIRE(a.lora.size() == c.lora.size());
    for (size_t i = 0; i < a.lora.size(); ++i) REQUIRE(bit_equal(a.lora[i], c.lora[i]));
}

TEST_CASE("gradient accumulation equals batching with identical sample order") {
    auto final_state = [](int batch, int accum) {
        auto setup = make_toy_setup(16, 2);
        auto b     = make_registered_backend(setup);
        auto cfg   = quick_train_config(10, 0, 5);
        cfg.batch_size = batch;
        cfg.grad_accum = accum;
        Trainer t(b, cfg, setup.source, setup.reference, setup.identity);
        t.run_phase1();
        std::vector<double> step_means;
        double acc = 0;
        int within = 0;
        for (const auto& m : t.history()) {
            acc += m.total * batch;  // undo per-batch mean to sum item losses
            within += batch;
            if (within == 4) {
                step_means.push_back(acc / 4.0);
                acc    = 0;
                within = 0;
            }
        }
        return std::make_pair(step_means, b.concept_embedding("source")->value);
    };
    auto [l14, e14] = final_state(1, 4);
    auto [l41, e41] = final_state(4, 1);
    REQUIRE(l14.size() == l41.size());
    for (size_t i = 0; i < l14.size(); ++i)
        REQUIRE(l14[i] == Catch::Approx(l41[i]).margin(1e-5));
    REQUIRE(max_abs_diff(e14, e41) < 1e-8);
}

TEST_CASE("identity skip policy fails the run when detection collapses") {
    auto setup = make_toy_setup(16, 2);
    auto b     = make_registered_backend(setup);
    // a detector that never fires on anything but pathological contrast
    setup.identity.detector = std::make_shared<VarianceGatedDetector>(toy_face_box(16), 1e9);
    auto cfg = quick_train_config(0, 200, 3);
    cfg.task_mix              = {0.0, 0.0, 1.0};  // composed only
    cfg.identity_skip_warmup  = 5;
    Trainer t(b, cfg, setup.source, setup.reference, setup.identity);
    REQUIRE_THROWS_AS(t.run_phase2(), InvariantViolation);
    REQUIRE(t.identity_skipped() > 0);
}

TEST_CASE("phase 2 with composed and AR disabled reduces to lora-augmented phase 1") {
    auto run  = [](bool twice) {
        auto setup = make_toy_setup(16, 2);
        auto b     = make_registered_backend(setup);
        auto cfg   = quick_train_config(0, 15, 11);
        cfg.weights.lambda_attn = 0.0;
        cfg.weights.lambda_id   = 0.0;
        cfg.task_mix            = {0.5, 0.5, 0.0};
        Trainer t(b, cfg, setup.source, setup.reference, setup.identity);
        t.run_phase2();
        std::vector<double> losses;
        for (const auto& m : t.history()) losses.push_back(m.total);
        return losses;
    };
    auto a = run(false), c = run(true);
    REQUIRE(a == c);  // deterministic, and only the masked term is present
    auto setup = make_toy_setup(16, 2);
    auto b     = make_registered_backend(setup);
    auto cfg   = quick_train_config(0, 15, 11);
    cfg.weights.lambda_attn = 0.0;
    cfg.weights.lambda_id   = 0.0;
    cfg.task_mix            = {0.5, 0.5, 0.0};
    Trainer t(b, cfg, setup.source, setup.reference, setup.identity);
    t.run_phase2();
    for (const auto& m : t.history()) {
        REQUIRE(m.terms.count("attn") == 0);
        REQUIRE(m.terms.count("id") == 0);
        REQUIRE(m.total == Catch::Approx(m.terms.at("mask")).margin(1e-12));
    }
}

TEST_CASE("general object mode adds the structure and style terms") {
    auto setup = make_toy_setup(16, 2);
    auto b     = make_registered_backend(setup);
    ToyFeatureExtractor extractor(1, 2, 12, 16, 601);
    auto cfg = quick_train_config(0, 10, 13);
    cfg.general_object = true;
    cfg.task_mix       = {0.0, 0.5, 0.5};
    Trainer t(b, cfg, setup.source, setup.reference, setup.identity, &extractor);
    t.run_phase2();
    bool saw_general = false, saw_unmasked_ref = false;
    for (const auto& m : t.history()) {
        if (m.task == "composed") {
            REQUIRE(m.terms.count("ssim") == 1);
            REQUIRE(m.terms.count("contra") == 1);
            REQUIRE(m.terms.count("style") == 1);
            saw_general = true;
        }
        if (m.task == "reference") saw_unmasked_ref = true;
    }
    REQUIRE(saw_general);
    REQUIRE(saw_unmasked_ref);
}

TEST_CASE("checkpoint round trip and split-phase equivalence") {
    namespace fs = std::filesystem;
    auto dir = fs::temp_directory_path() / "stylefuse_ckpt_test";
    fs::remove_all(dir);

    // run phase 1 + 2 in-process
    auto setup = make_toy_setup(16, 2);
    auto b_all = make_registered_backend(setup);
    Trainer t_all(b_all, quick_train_config(15, 15, 21), setup.source, setup.reference,
                  setup.identity);
    t_all.run_phase1();
    save_checkpoint((dir / "phase1").string(), b_all, 1, {{"note", "test"}}, {{"cmd", "all"}});
    t_all.run_phase2();
    save_checkpoint((dir / "phase2a").string(), b_all, 2, {{"note", "test"}}, {{"cmd", "all"}});

    // resume: fresh backend, load phase-1 checkpoint, run phase 2
    auto b_res = make_registered_backend(setup);
    apply_checkpoint(b_res, load_checkpoint((dir / "phase1").string()));
    REQUIRE(bit_equal(b_res.concept_embedding("source")->value,
                      load_checkpoint((dir / "phase1").string()).tensors.at("embedding.source")));
    Trainer t_res(b_res, quick_train_config(15, 15, 21), setup.source, setup.reference,
                  setup.identity);
    t_res.run_phase2();
    save_checkpoint((dir / "phase2b").string(), b_res, 2, {{"note", "test"}}, {{"cmd", "resumed"}});

    // identical learned state regardless of the split; provenance differs
    REQUIRE(checkpoint_hash((dir / "phase2a").string()) ==
            checkpoint_hash((dir / "phase2b").string()));

    SECTION("apply refuses a mismatched backend") {
        ToyBackendConfig other = setup.backend_cfg;
        other.seed             = 4321;
        ToyDiffusionBackend b_bad(other);
        b_bad.register_concept("source", "<v1>");
        b_bad.register_concept("reference", "<v2>");
        REQUIRE_THROWS_AS(apply_checkpoint(b_bad, load_checkpoint((dir / "phase1").string())),
                          ConfigError);
    }
    SECTION("tensor blob round trip") {
        Rng rng(3);
        std::vector<std::pair<std::string, Tensor>> ts = {
            {"a", rng.normal_tensor({3, 4})}, {"b.c", rng.normal_tensor({2, 2, 2})}};
        write_tensor_blob((dir / "blob.bin").string(), ts);
        auto back = read_tensor_blob((dir / "blob.bin").string());
        REQUIRE(back.size() == 2);
        REQUIRE(bit_equal(back.at("a"), ts[0].second));
        REQUIRE(bit_equal(back.at("b.c"), ts[1].second));
        REQUIRE_THROWS_AS(read_tensor_blob((dir / "missing.bin").string()), ValidationError);
    }
}
