#pragma once

// Deterministic round-based agent <-> operator message bus with interception
// taps.  Dual attacks are realized as channel taps here, never as edits inside
// the solver loop.  Every delivery is logged with pre/post digests and, when a
// tap changed the payload, the owner of each mutation.

#include "spdsim/common.hpp"

#include <nlohmann/json.hpp>

#include <fstream>
#include <functional>
#include <map>

namespace spdsim {

enum class Direction { ToOperator, FromOperator, OperatorIO };

inline const char* to_string(Direction d) {
    switch (d) {
        case Direction::ToOperator: return "to_operator";
        case Direction::FromOperator: return "from_operator";
        default: return "operator_io";
    }
}

enum class MessageKind { PrimalReport, DualBroadcast, OperatorInternal };

inline const char* to_string(MessageKind k) {
    switch (k) {
        case MessageKind::PrimalReport: return "primal_report";
        case MessageKind::DualBroadcast: return "dual_broadcast";
        default: return "operator_internal";
    }
}

struct ChannelKey {
    int agent = -1;  // -1 for operator-side channels
    Direction dir = Direction::ToOperator;
    auto operator<=>(const ChannelKey&) const = default;
};

// transform(round, payload) -> replacement payload (same length).
using TapTransform = std::function<Vec(int, const Vec&)>;

struct ChannelTap {
    ChannelKey channel;
    int owner = -1;  // attacker id
    TapTransform transform;
};

struct Mutation {
    int owner = -1;
    std::uint64_t digest_after = 0;
};

struct RoundLogRecord {
    int round = 0;
    MessageKind kind = MessageKind::PrimalReport;
    int from = 0;
    int to = 0;
    std::uint64_t pre_digest = 0;
    std::uint64_t post_digest = 0;
    std::vector<Mutation> mutations;
    Vec payload;  // post-tap; retained only when payload logging is on
};

enum class LogMode { Off, Digests, Payloads };

class MessageBus {
  public:
    using TapHandle = int;

    explicit MessageBus(LogMode mode = LogMode::Digests) : mode_(mode) {}

    TapHandle register_tap(ChannelTap tap) {
        for (const auto& [h, t] : taps_)
            if (t.channel == tap.channel && t.owner == tap.owner)
                throw ConfigError("register_tap: duplicate tap by attacker " + std::to_string(tap.owner) +
                                  " on channel (" + std::to_string(tap.channel.agent) + ", " +
                                  to_string(tap.channel.dir) + ")");
        const TapHandle h = next_handle_++;
        taps_.emplace(h, std::move(tap));
        return h;
    }

    void remove_tap(TapHandle h) { taps_.erase(h); }

    bool has_tap(ChannelKey channel) const {
        for (const auto& [h, t] : taps_)
            if (t.channel == channel) return true;
        return false;
    }

    // Pass a payload through the channel: taps apply in registration order.
    Vec deliver(MessageKind kind, int round, int from, int to, ChannelKey channel, Vec payload) {
        if (mode_ == LogMode::Off) {
            for (const auto& [h, tap] : taps_) {  // std::map iterates in handle (registration) order
                if (!(tap.channel == channel)) continue;
                Vec out = tap.transform(round, payload);
                if (out.size() != payload.size())
                    throw ProtocolError("tap by attacker " + std::to_string(tap.owner) +
                                        " changed payload length");
                payload = std::move(out);
            }
            return payload;
        }
        RoundLogRecord rec;
        rec.round = round;
        rec.kind = kind;
        rec.from = from;
        rec.to = to;
        rec.pre_digest = digest(payload);
        std::uint64_t prev = rec.pre_digest;
        for (const auto& [h, tap] : taps_) {
            if (!(tap.channel == channel)) continue;
            Vec out = tap.transform(round, payload);
            if (out.size() != payload.size())
                throw ProtocolError("tap by attacker " + std::to_string(tap.owner) + " changed payload length");
            const std::uint64_t d = digest(out);
            if (d != prev) rec.mutations.push_back({tap.owner, d});
            prev = d;
            payload = std::move(out);
        }
        rec.post_digest = prev;
        if (mode_ == LogMode::Payloads) rec.payload = payload;
        log_.push_back(std::move(rec));
        return payload;
    }

    LogMode log_mode() const { return mode_; }

    const std::vector<RoundLogRecord>& log() const { return log_; }

    // Total number of payload mutations attributed to `owner` on channels of
    // the given agent (any direction).  Basis for channel-hygiene checks.
    int mutation_count(int owner, int agent) const {
        int c = 0;
        for (const auto& rec : log_) {
            const int ch_agent = (rec.kind == MessageKind::PrimalReport) ? rec.from : rec.to;
            if (ch_agent != agent) continue;
            for (const auto& m : rec.mutations)
                if (m.owner == owner) ++c;
        }
        return c;
    }

    void export_jsonl(const std::string& path) const {
        std::ofstream out(path);
        if (!out) throw ConfigError("round log: cannot write " + path);
        for (const auto& rec : log_) {
            nlohmann::json j;
            j["round"] = rec.round;
            j["kind"] = to_string(rec.kind);
            j["from"] = rec.from;
            j["to"] = rec.to;
            j["pre_tap_digest"] = digest_hex(rec.pre_digest);
            j["post_tap_digest"] = digest_hex(rec.post_digest);
            if (!rec.mutations.empty()) {
                auto arr = nlohmann::json::array();
                for (const auto& m : rec.mutations)
                    arr.push_back({{"owner", m.owner}, {"digest", digest_hex(m.digest_after)}});
                j["mutations"] = arr;
            }
            if (mode_ == LogMode::Payloads) {
                auto arr = nlohmann::json::array();
                for (Eigen::Index i = 0; i < rec.payload.size(); ++i) arr.push_back(rec.payload[i]);
                j["payload"] = arr;
            }
            out << j.dump() << '\n';
        }
    }

  private:
    LogMode mode_;
    int next_handle_ = 0;
    std::map<TapHandle, ChannelTap> taps_;
    std::vector<RoundLogRecord> log_;
};

}  // namespace spdsim
