#include <cstring>
#include <filesystem>

#include "doctest.h"
#include "fixtures.hpp"

#include "covmoe/fedsim.hpp"

using namespace covmoe;

namespace {

FedConfig quick_fed() {
    FedConfig f;
    f.clients = 2;
    f.local.epochs = 2;
    f.local.lr = 1e-2;
    f.local.batch_size = 8;
    f.gate.epochs = 3;
    f.gate.lr = 1e-2;
    f.gate.batch_size = 8;
    f.cold_start_budget = 4;
    f.cold_start.epochs = 2;
    f.cold_start.lr = 1e-2;
    return f;
}

Federation make_fed(const FedConfig& f = quick_fed()) {
    return Federation(fixture::regions(2, 24 * 30, 8), fixture::small_spec(), f, 5, 2);
}

FedMessage upload_message() {
    const MoELayer layer = MoELayer::init(MoEConfig{}, 4, 3, CovSelectorRule::region_identity(2, 2), Rng(1));
    ByteWriter w;
    write_layer(w, layer);
    return FedMessage{MessageKind::expert_upload, "BE", "server", 1, w.take()};
}

}  // namespace

TEST_SUITE("fedsim") {
    TEST_CASE("messages round-trip and reject damage") {
        const FedMessage m = upload_message();
        const Bytes wire = m.serialize();
        CHECK(wire.size() == m.byte_len());
        CHECK(m.byte_len() == kEnvelopeFixedBytes + 2 + 6 + m.payload.size());
        const FedMessage back = FedMessage::parse(wire);
        CHECK(back.sender == "BE");
        CHECK(back.receiver == "server");
        CHECK(back.payload == m.payload);
        CHECK(back.kind == MessageKind::expert_upload);

        Bytes bad = wire;
        bad[0] = 'X';
        CHECK_THROWS_AS(FedMessage::parse(bad), ProtocolError);
        bad = wire;
        bad[4] = 9;  // unknown kind
        CHECK_THROWS_AS(FedMessage::parse(bad), ProtocolError);
        bad = wire;
        bad.pop_back();
        CHECK_THROWS_AS(FedMessage::parse(bad), ProtocolError);
        bad = wire;
        bad.push_back(0);
        CHECK_THROWS_AS(FedMessage::parse(bad), ProtocolError);

        Bytes payload = m.payload;
        payload.push_back(1);
        CHECK_THROWS_AS(parse_layer_payload(payload), ProtocolError);
        FedMessage raw{MessageKind::expert_upload, "BE", "server", 1, Bytes(64, 7)};
        CHECK_THROWS_AS(FedMessage::parse(raw.serialize()), ProtocolError);
    }

    TEST_CASE("ledger and archive") {
        CommLedger l;
        const FedMessage m = upload_message();
        l.record(m);
        l.record(m);
        CHECK(l.entries().size() == 2);
        CHECK(l.total_bytes() == 2 * m.byte_len());
        CHECK(l.count(MessageKind::expert_upload) == 2);
        CHECK(l.count(MessageKind::deploy_bundle) == 0);
        CHECK(l.to_csv().rfind("round,kind,sender,receiver,bytes\n1,ExpertUpload,BE,server,", 0) == 0);

        const auto path = std::filesystem::temp_directory_path() / "covmoe_archive_test.bin";
        write_archive(path, {m.serialize(), Bytes{}});
        const auto recs = read_archive(path);
        REQUIRE(recs.size() == 2);
        CHECK(recs[0] == m.serialize());
        CHECK(recs[1].empty());
        CHECK_THROWS_AS(read_archive("/nonexistent/archive.bin"), IoError);
    }

    TEST_CASE("config validation") {
        FedConfig f = quick_fed();
        f.clients = 1;
        CHECK_THROWS_AS(f.validate(), ConfigError);
        f = quick_fed();
        f.dval_fraction = 0.0;
        CHECK_THROWS_AS(f.validate(), ConfigError);
        f = quick_fed();
        CHECK(FedConfig::from_json(f.to_json()).to_json() == f.to_json());
    }

    TEST_CASE("phases must run in order") {
        Federation fed = make_fed();
        CHECK(fed.phase() == FedPhase::created);
        CHECK_THROWS_AS(fed.upload_experts(), ProtocolError);
        CHECK_THROWS_AS(fed.build_pool(), ProtocolError);
        CHECK_THROWS_AS(fed.train_global_gate(), ProtocolError);
        CHECK_THROWS_AS(fed.deploy(), ProtocolError);
        CHECK_THROWS_AS(fed.deployed_model(0), ProtocolError);
        fed.train_local_experts();
        CHECK_THROWS_AS(fed.train_local_experts(), ProtocolError);
        CHECK_THROWS_AS(fed.deploy(), ProtocolError);
        fed.upload_experts();
        fed.build_pool();
        fed.train_global_gate();
        fed.deploy();
        CHECK(fed.phase() == FedPhase::deployed);
        CHECK_THROWS_AS(fed.deploy(), ProtocolError);
    }

    TEST_CASE("one-shot federation end to end") {
        Federation fed = make_fed();
        fed.run_all();
        const auto& ledger = fed.ledger();
        CHECK(ledger.count(MessageKind::expert_upload) == 2);
        CHECK(ledger.count(MessageKind::deploy_bundle) == 2);
        CHECK(fed.archive().size() == ledger.entries().size());

        // Each upload is exactly one layer record plus the envelope.
        for (std::size_t i = 0; i < 2; ++i) {
            const auto& e = ledger.entries()[i];
            const auto& c = fed.clients()[i];
            CHECK(e.bytes == envelope_bytes(c.client_id.size(), 6) + layer_record_bytes(c.model.moe));
        }

        const ForecastModel& pool = *fed.server().model;
        CHECK(pool.moe.routed.size() == 2 * fixture::small_spec().moe.routed);
        CHECK(pool.moe.conditional.size() == 2 * fixture::small_spec().moe.conditional);
        std::vector<std::uint64_t> fps;
        for (const auto* e : pool.moe.experts()) fps.push_back(e->fingerprint());
        CHECK(fps == fed.server().pool_fingerprints);
        REQUIRE(fed.server().gate_report);
        CHECK(fed.server().gate_report->final_val_loss < fed.server().gate_report->initial_val_loss);

        for (std::size_t i = 0; i < 2; ++i) {
            const ForecastModel& m = fed.deployed_model(i);
            CHECK(m.moe.fingerprint() == pool.moe.fingerprint());
            CHECK(m.backbone.intact());
            CHECK(m.tokenizer.fingerprint() == fed.clients()[i].tokenizer_fingerprint);
        }
        // Region r lands in the conditional block of the client that owns it.
        CHECK(cov_select(pool.moe.rule, 0) == 0);
        const std::size_t C = fixture::small_spec().moe.conditional;
        CHECK(cov_select(pool.moe.rule, 1) == C + 1 % C);
    }

    TEST_CASE("concurrent local training matches sequential") {
        FedConfig f = quick_fed();
        Federation a = make_fed(f);
        f.concurrent = true;
        Federation b = make_fed(f);
        a.run_all();
        b.run_all();
        CHECK(a.archive() == b.archive());
        CHECK(a.server().model->fingerprint() == b.server().model->fingerprint());
    }

    TEST_CASE("keep-local override and pool construction errors") {
        FedConfig f = quick_fed();
        f.keep_local_gates = true;
        Federation fed = make_fed(f);
        fed.run_all();
        CHECK(fed.deployed_model(0).moe.fingerprint() == fed.clients()[0].model.moe.fingerprint());
        CHECK_THROWS_AS(build_pool_layer({}, {}, fixture::small_spec(), 2, 2, GateInput::covariate_only, Rng(1)),
                        ProtocolError);
    }

    TEST_CASE("cold start and personalized routing") {
        Federation fed = make_fed();
        fed.run_all();
        const ClientState& c = fed.clients()[0];
        const ForecastModel& bundle = *c.bundle;
        const FedConfig f = quick_fed();

        const AdaptResult none = cold_start_adapt(c, bundle, 0, 2, f.cold_start);
        CHECK_FALSE(none.adapted);
        CHECK(none.model.fingerprint() == bundle.fingerprint());

        const AdaptResult a = cold_start_adapt(c, bundle, 4, 2, f.cold_start);
        CHECK(a.adapted);
        CHECK(a.steps > 0);
        for (std::size_t i = 0; i < bundle.moe.routed.size(); ++i)
            CHECK(a.model.moe.routed[i].base_fingerprint() == bundle.moe.routed[i].base_fingerprint());
        CHECK(std::isfinite(a.post.mase));
        CHECK_THROWS_AS(cold_start_adapt(c, bundle, c.partition.train.size() + 1, 2, f.cold_start), ConfigError);
        CHECK_THROWS_AS(cold_start_adapt(c, bundle, 4, 0, f.cold_start), ConfigError);

        const PersonalizedResult p = personalized_routing(c, bundle);
        CHECK(p.training_steps == 0);
        CHECK(p.decisions.size() == c.partition.test.size());
        for (const auto& d : p.decisions[0]) CHECK(d.routed == p.decisions[0][0].routed);
        CHECK(std::isfinite(p.report.wql));
    }

    TEST_CASE("communication accounting is analytic") {
        Federation fed = make_fed();
        fed.run_all();
        const ModelDims dims = fed.server().model->dims;
        const CommReport r = communication_report(fed.ledger(), dims);
        CHECK(r.messages == 4);
        CHECK(r.moe_bytes == fed.ledger().total_bytes());
        const std::size_t extra = kTokenizerHeaderBytes + 8 * tokenizer_param_count(dims) + kBackboneHeaderBytes +
                                  8 * backbone_param_count(dims);
        CHECK(r.full_finetune_bytes == r.moe_bytes + 4 * extra);
        CHECK(r.reduction_fraction == doctest::Approx(1.0 - static_cast<double>(r.moe_bytes) /
                                                            static_cast<double>(r.full_finetune_bytes)));
    }

    TEST_CASE("privacy audit passes clean traffic and catches a planted leak") {
        Federation fed = make_fed();
        fed.run_all();
        SyntheticConfig sc;
        sc.regions = 2;
        sc.hours = 24 * 30;
        std::vector<std::vector<double>> raw;
        for (const auto& f : make_synthetic_frames(sc)) raw.push_back(f.target_series());

        const AuditResult ok = privacy_audit(fed.ledger(), fed.archive(), raw);
        CHECK(ok.pass);
        CHECK(ok.messages_checked == 4);
        CHECK(ok.offsets_scanned > 0);
        CHECK(ok.to_json()["verdict"] == "PASS");

        // Smuggle eight consecutive raw prices into an expert weight row.
        MoEConfig cfg;
        cfg.hidden_ff = 8;
        MoELayer layer = MoELayer::init(cfg, 4, 3, CovSelectorRule::region_identity(2, 2), Rng(2));
        for (std::size_t j = 0; j < 8; ++j) layer.routed[0].w1.value(0, j) = raw[1][100 + j];
        ByteWriter w;
        write_layer(w, layer);
        const FedMessage leak{MessageKind::expert_upload, "DE", "server", 1, w.take()};
        CommLedger ledger = fed.ledger();
        ledger.record(leak);
        auto archive = fed.archive();
        archive.push_back(leak.serialize());
        const AuditResult bad = privacy_audit(ledger, archive, raw);
        CHECK_FALSE(bad.pass);
        REQUIRE(!bad.findings.empty());
        CHECK(bad.findings[0].message_index == 4);
        CHECK(bad.to_json()["verdict"] == "FAIL");

        // Archive and ledger out of step is a failure too.
        archive.pop_back();
        CHECK_FALSE(privacy_audit(ledger, archive, raw).pass);
    }
}
