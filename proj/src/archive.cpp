#include "aura/archive.hpp"

#include <array>
#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>
#include <sstream>

#include <openssl/evp.h>

#include "aura/error.hpp"

namespace aura::archive {

static_assert(std::endian::native == std::endian::little, "archive I/O assumes a little-endian host");

namespace {

constexpr char kMagic[8] = {'A', 'U', 'R', 'A', 'A', 'R', 'C', 'H'};
constexpr std::size_t kDigestSize = 32;

enum class DType : std::uint8_t { f32 = 0, f64 = 1, i64 = 2 };

DType dtype_code(const torch::Tensor& t) {
    switch (t.scalar_type()) {
    case torch::kFloat32:
        return DType::f32;
    case torch::kFloat64:
        return DType::f64;
    case torch::kInt64:
        return DType::i64;
    default:
        throw ArchiveError("unsupported tensor dtype " + std::string(c10::toString(t.scalar_type())));
    }
}

torch::ScalarType scalar_type(DType code) {
    switch (code) {
    case DType::f32:
        return torch::kFloat32;
    case DType::f64:
        return torch::kFloat64;
    case DType::i64:
        return torch::kInt64;
    }
    throw ArchiveError("unknown dtype code " + std::to_string(static_cast<int>(code)));
}

template <typename T>
void put(std::string& out, T value) {
    char raw[sizeof(T)];
    std::memcpy(raw, &value, sizeof(T));
    out.append(raw, sizeof(T));
}

class Reader {
public:
    explicit Reader(std::string_view bytes) : bytes_(bytes) {}

    template <typename T>
    T get() {
        T value;
        std::memcpy(&value, take(sizeof(T)).data(), sizeof(T));
        return value;
    }

    std::string_view take(std::size_t n) {
        if (n > bytes_.size() - pos_) {
            throw ArchiveError("archive truncated");
        }
        auto view = bytes_.substr(pos_, n);
        pos_ += n;
        return view;
    }

    bool done() const { return pos_ == bytes_.size(); }

private:
    std::string_view bytes_;
    std::size_t pos_ = 0;
};

std::array<unsigned char, kDigestSize> digest(std::string_view bytes) {
    std::array<unsigned char, kDigestSize> out{};
    unsigned int len = 0;
    if (EVP_Digest(bytes.data(), bytes.size(), out.data(), &len, EVP_sha256(), nullptr) != 1 ||
        len != kDigestSize) {
        throw ArchiveError("SHA-256 computation failed");
    }
    return out;
}

std::string to_hex(const std::array<unsigned char, kDigestSize>& d) {
    static constexpr char kHex[] = "0123456789abcdef";
    std::string hex;
    hex.reserve(2 * kDigestSize);
    for (unsigned char c : d) {
        hex.push_back(kHex[c >> 4]);
        hex.push_back(kHex[c & 0xF]);
    }
    return hex;
}

void append_tensor(std::string& out, const NamedTensor& nt) {
    auto t = nt.value.detach().to(torch::kCPU).contiguous();
    put<std::uint32_t>(out, static_cast<std::uint32_t>(nt.name.size()));
    out.append(nt.name);
    put<std::uint8_t>(out, static_cast<std::uint8_t>(dtype_code(t)));
    put<std::uint32_t>(out, static_cast<std::uint32_t>(t.dim()));
    for (auto d : t.sizes()) {
        put<std::int64_t>(out, d);
    }
    out.append(static_cast<const char*>(t.data_ptr()), t.numel() * t.element_size());
}

} // namespace

const torch::Tensor* Archive::find(const std::string& name) const {
    for (const auto& nt : tensors) {
        if (nt.name == name) {
            return &nt.value;
        }
    }
    return nullptr;
}

std::string encode(const Archive& archive) {
    std::string out(kMagic, sizeof(kMagic));
    put<std::uint32_t>(out, kVersion);
    const auto header = archive.header.dump();
    put<std::uint64_t>(out, header.size());
    out.append(header);
    put<std::uint64_t>(out, archive.tensors.size());
    for (const auto& nt : archive.tensors) {
        append_tensor(out, nt);
    }
    const auto d = digest(out);
    out.append(reinterpret_cast<const char*>(d.data()), d.size());
    return out;
}

Archive decode(const std::string& bytes) {
    if (bytes.size() < sizeof(kMagic) + kDigestSize ||
        std::memcmp(bytes.data(), kMagic, sizeof(kMagic)) != 0) {
        throw ArchiveError("not a tensor archive (bad magic)");
    }
    const std::string_view body(bytes.data(), bytes.size() - kDigestSize);
    const auto expected = digest(body);
    if (std::memcmp(expected.data(), bytes.data() + body.size(), kDigestSize) != 0) {
        throw ArchiveError("archive checksum failure: content is corrupt");
    }

    Reader in(body);
    in.take(sizeof(kMagic));
    const auto version = in.get<std::uint32_t>();
    if (version != kVersion) {
        throw ArchiveError("unsupported archive version " + std::to_string(version));
    }
    Archive archive;
    const auto header_len = in.get<std::uint64_t>();
    try {
        archive.header = nlohmann::json::parse(in.take(header_len));
    } catch (const nlohmann::json::exception& e) {
        throw ArchiveError(std::string("archive header is not valid JSON: ") + e.what());
    }
    const auto count = in.get<std::uint64_t>();
    for (std::uint64_t k = 0; k < count; ++k) {
        NamedTensor nt;
        nt.name = std::string(in.take(in.get<std::uint32_t>()));
        const auto type = scalar_type(static_cast<DType>(in.get<std::uint8_t>()));
        const auto rank = in.get<std::uint32_t>();
        std::vector<std::int64_t> dims(rank);
        for (auto& d : dims) {
            d = in.get<std::int64_t>();
            if (d < 0) {
                throw ArchiveError("negative dimension in tensor '" + nt.name + "'");
            }
        }
        nt.value = torch::empty(dims, torch::TensorOptions().dtype(type));
        const auto raw = in.take(static_cast<std::size_t>(nt.value.numel() * nt.value.element_size()));
        std::memcpy(nt.value.data_ptr(), raw.data(), raw.size());
        archive.tensors.push_back(std::move(nt));
    }
    if (!in.done()) {
        throw ArchiveError("trailing bytes after the last tensor");
    }
    return archive;
}

void write(const std::filesystem::path& path, const Archive& archive) {
    const auto bytes = encode(archive);
    if (path.has_parent_path()) {
        std::filesystem::create_directories(path.parent_path());
    }
    auto tmp = path;
    tmp += ".partial";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
        if (!out) {
            throw ArchiveError("cannot write " + tmp.string());
        }
    }
    std::filesystem::rename(tmp, path);
}

namespace {

std::string slurp(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw ArchiveError("cannot open " + path.string());
    }
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

} // namespace

Archive read(const std::filesystem::path& path) {
    try {
        return decode(slurp(path));
    } catch (const ArchiveError& e) {
        throw ArchiveError(path.string() + ": " + e.what());
    }
}

std::string sha256_hex(std::string_view bytes) {
    return to_hex(digest(bytes));
}

std::string sha256_file(const std::filesystem::path& path) {
    return sha256_hex(slurp(path));
}

std::string tensors_checksum(const std::vector<NamedTensor>& tensors) {
    std::string buffer;
    for (const auto& nt : tensors) {
        append_tensor(buffer, nt);
    }
    return sha256_hex(buffer);
}

} // namespace aura::archive
