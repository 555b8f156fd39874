#include "fitcls/checkpoint.hpp"

#include "fitcls/eval.hpp"
#include "fitcls/rng.hpp"

#include <bit>
#include <fstream>
#include <numeric>
#include <sstream>

namespace fitcls {

namespace {

constexpr std::string_view kMagic = "FITC";

template <typename U>
void put_le(std::string& out, U v) {
    for (std::size_t i = 0; i < sizeof(U); ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

template <typename U>
U get_le(std::string_view bytes, std::size_t at) {
    U v = 0;
    for (std::size_t i = 0; i < sizeof(U); ++i) {
        v |= static_cast<U>(static_cast<unsigned char>(bytes[at + i])) << (8 * i);
    }
    return v;
}

std::size_t element_count(const std::vector<std::size_t>& shape) {
    return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

}  // namespace

const NamedArray& Checkpoint::array(std::string_view name) const {
    for (const auto& a : arrays) {
        if (a.name == name) return a;
    }
    throw CheckpointStructureError("checkpoint has no array '" + std::string(name) + "'");
}

bool Checkpoint::has_array(std::string_view name) const {
    for (const auto& a : arrays) {
        if (a.name == name) return true;
    }
    return false;
}

void Checkpoint::add(std::string name, std::vector<std::size_t> shape, std::vector<double> data) {
    if (element_count(shape) != data.size()) {
        throw CheckpointStructureError("array '" + name + "': shape does not match " + std::to_string(data.size()) +
                                       " values");
    }
    arrays.push_back({std::move(name), std::move(shape), std::move(data)});
}

std::string serialize_checkpoint(const Checkpoint& ckpt) {
    nlohmann::json list = nlohmann::json::array();
    std::size_t payload = 0;
    for (const auto& a : ckpt.arrays) {
        if (element_count(a.shape) != a.data.size()) {
            throw CheckpointStructureError("array '" + a.name + "': shape does not match its data");
        }
        list.push_back({{"name", a.name}, {"shape", a.shape}});
        payload += a.data.size();
    }
    const nlohmann::json header = {{"kind", ckpt.kind},
                                   {"vocab_hash", hex64(ckpt.vocab_hash)},
                                   {"config_hash", hex64(fnv1a64(ckpt.config.dump()))},
                                   {"config", ckpt.config},
                                   {"meta", ckpt.meta},
                                   {"arrays", list}};
    const std::string text = header.dump();

    std::string out;
    out.reserve(kMagic.size() + 12 + text.size() + 8 * payload);
    out += kMagic;
    put_le<std::uint32_t>(out, kCheckpointVersion);
    put_le<std::uint64_t>(out, text.size());
    out += text;
    for (const auto& a : ckpt.arrays) {
        for (double v : a.data) put_le<std::uint64_t>(out, std::bit_cast<std::uint64_t>(v));
    }
    return out;
}

Checkpoint parse_checkpoint(std::string_view bytes) {
    if (bytes.size() < kMagic.size() || bytes.substr(0, kMagic.size()) != kMagic) {
        throw CheckpointVersionError("not a checkpoint: bad magic");
    }
    if (bytes.size() < 16) throw CheckpointTruncatedError("checkpoint truncated inside the preamble");
    const auto version = get_le<std::uint32_t>(bytes, 4);
    if (version != kCheckpointVersion) {
        throw CheckpointVersionError("unsupported checkpoint version " + std::to_string(version) + " (expected " +
                                     std::to_string(kCheckpointVersion) + ")");
    }
    const auto header_len = get_le<std::uint64_t>(bytes, 8);
    if (header_len > bytes.size() - 16) throw CheckpointTruncatedError("checkpoint truncated inside the header");

    nlohmann::json header;
    try {
        header = nlohmann::json::parse(bytes.substr(16, header_len));
    } catch (const nlohmann::json::exception& e) {
        throw CheckpointStructureError(std::string("checkpoint header is not valid JSON: ") + e.what());
    }

    Checkpoint ckpt;
    std::vector<std::pair<std::string, std::vector<std::size_t>>> declared;
    try {
        ckpt.kind = header.at("kind").get<std::string>();
        ckpt.vocab_hash = std::stoull(header.at("vocab_hash").get<std::string>(), nullptr, 16);
        ckpt.config = header.at("config");
        ckpt.meta = header.at("meta");
        for (const auto& a : header.at("arrays")) {
            declared.emplace_back(a.at("name").get<std::string>(), a.at("shape").get<std::vector<std::size_t>>());
        }
    } catch (const std::exception& e) {
        throw CheckpointStructureError(std::string("checkpoint header is malformed: ") + e.what());
    }

    std::size_t at = 16 + header_len;
    for (auto& [name, shape] : declared) {
        const std::size_t n = element_count(shape);
        if (n > (bytes.size() - at) / 8) {
            throw CheckpointTruncatedError("checkpoint payload truncated in array '" + name + "'");
        }
        std::vector<double> data(n);
        for (std::size_t i = 0; i < n; ++i, at += 8) data[i] = std::bit_cast<double>(get_le<std::uint64_t>(bytes, at));
        ckpt.arrays.push_back({std::move(name), std::move(shape), std::move(data)});
    }
    if (at != bytes.size()) {
        throw CheckpointStructureError("checkpoint has " + std::to_string(bytes.size() - at) +
                                       " bytes beyond the declared arrays");
    }
    return ckpt;
}

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt) {
    const std::string bytes = serialize_checkpoint(ckpt);
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw InputError("cannot write checkpoint " + path.string());
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw InputError("failed writing checkpoint " + path.string());
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw InputError("cannot open checkpoint " + path.string());
    std::ostringstream ss;
    ss << in.rdbuf();
    return parse_checkpoint(ss.str());
}

}  // namespace fitcls
