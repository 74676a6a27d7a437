#include "rtcl/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <limits>

namespace rtcl {

static_assert(std::endian::native == std::endian::little, "checkpoint codec assumes a little-endian host");
static_assert(std::numeric_limits<float>::is_iec559 && sizeof(float) == 4);

namespace {

struct Writer {
    std::string buf;

    void bytes(const void* p, std::size_t n) { buf.append(static_cast<const char*>(p), n); }
    void u8(uint8_t v) { bytes(&v, 1); }
    void u32(uint32_t v) { bytes(&v, 4); }
    void u64(uint64_t v) { bytes(&v, 8); }
    void i32(int32_t v) { bytes(&v, 4); }
    void f32(float v) { bytes(&v, 4); }
    void str(const std::string& s) {
        u32(static_cast<uint32_t>(s.size()));
        bytes(s.data(), s.size());
    }
    void tensor(const Tensor& t) {
        u32(static_cast<uint32_t>(t.rank()));
        for (int d : t.shape()) i32(d);
        for (real v : t.data()) f32(static_cast<float>(v));
    }
};

struct Reader {
    const std::string& buf;
    std::size_t pos = 0;
    std::string section = "header";

    void need(std::size_t n) {
        if (pos + n > buf.size()) {
            throw CheckpointError("checkpoint truncated inside section '" + section + "'");
        }
    }
    void bytes(void* p, std::size_t n) {
        need(n);
        std::memcpy(p, buf.data() + pos, n);
        pos += n;
    }
    uint8_t u8() { uint8_t v; bytes(&v, 1); return v; }
    uint32_t u32() { uint32_t v; bytes(&v, 4); return v; }
    uint64_t u64() { uint64_t v; bytes(&v, 8); return v; }
    int32_t i32() { int32_t v; bytes(&v, 4); return v; }
    float f32() { float v; bytes(&v, 4); return v; }
    std::string str() {
        const uint32_t n = u32();
        need(n);
        std::string s(buf.data() + pos, n);
        pos += n;
        return s;
    }
    Tensor tensor(bool requires_grad) {
        const uint32_t rank = u32();
        if (rank == 0 || rank > 8) {
            throw CheckpointError("section '" + section + "' holds a tensor with bad rank " +
                                  std::to_string(rank));
        }
        std::vector<int> shape;
        std::int64_t count = 1;
        for (uint32_t i = 0; i < rank; ++i) {
            const int d = i32();
            if (d <= 0) throw CheckpointError("section '" + section + "' holds a non-positive dimension");
            shape.push_back(d);
            count *= d;
        }
        std::vector<real> data(static_cast<std::size_t>(count));
        for (auto& v : data) v = static_cast<real>(f32());
        return Tensor::from(std::move(shape), std::move(data), requires_grad);
    }
};

void write_backbone(Writer& w, const FrozenBackbone& fb) {
    const auto& c = fb.w.cfg;
    for (int v : {c.image_h, c.image_w, c.channels, c.patch, c.dim, c.layers, c.heads, c.mlp_dim}) {
        w.i32(v);
    }
    w.u64(fb.digest);
    const auto tensors = fb.w.all_tensors();
    w.u32(static_cast<uint32_t>(tensors.size()));
    for (const auto& t : tensors) w.tensor(t);
}

FrozenBackbone read_backbone(Reader& r) {
    BackboneConfig c;
    c.image_h = r.i32();
    c.image_w = r.i32();
    c.channels = r.i32();
    c.patch = r.i32();
    c.dim = r.i32();
    c.layers = r.i32();
    c.heads = r.i32();
    c.mlp_dim = r.i32();
    c.validate();
    const uint64_t stored_digest = r.u64();
    const uint32_t n = r.u32();
    const uint32_t expect = 4 + 16 * static_cast<uint32_t>(c.layers);
    if (n != expect) {
        throw CheckpointError("backbone section holds " + std::to_string(n) + " tensors, expected " +
                              std::to_string(expect));
    }
    BackboneWeights w;
    w.cfg = c;
    w.patch_proj = r.tensor(false);
    w.patch_bias = r.tensor(false);
    w.cls_token = r.tensor(false);
    w.pos_embed = r.tensor(false);
    for (int l = 0; l < c.layers; ++l) {
        BlockWeights b;
        b.ln1_g = r.tensor(false);
        b.ln1_b = r.tensor(false);
        b.wq = r.tensor(false);
        b.bq = r.tensor(false);
        b.wk = r.tensor(false);
        b.bk = r.tensor(false);
        b.wv = r.tensor(false);
        b.bv = r.tensor(false);
        b.wo = r.tensor(false);
        b.bo = r.tensor(false);
        b.ln2_g = r.tensor(false);
        b.ln2_b = r.tensor(false);
        b.mlp_w1 = r.tensor(false);
        b.mlp_b1 = r.tensor(false);
        b.mlp_w2 = r.tensor(false);
        b.mlp_b2 = r.tensor(false);
        w.blocks.push_back(std::move(b));
    }
    FrozenBackbone fb;
    fb.w = std::move(w);
    fb.digest = stored_digest;
    if (fb.compute_digest() != stored_digest) {
        throw CheckpointError("backbone section digest does not match its weights");
    }
    return fb;
}

void write_slot(Writer& w, const AdapterSlot& s) {
    w.i32(s.id);
    w.i32(s.rank);
    w.i32(s.layers);
    w.i32(s.dim);
    w.u32(static_cast<uint32_t>(s.class_ids.size()));
    for (int cid : s.class_ids) w.i32(cid);
    for (const auto& layer : s.lora) {
        for (const auto& pair : layer) {
            w.tensor(pair.down);
            w.tensor(pair.up);
        }
    }
    w.tensor(s.head_w);
    w.tensor(s.head_b);
}

AdapterSlot read_slot(Reader& r) {
    AdapterSlot s;
    s.id = r.i32();
    s.rank = r.i32();
    s.layers = r.i32();
    s.dim = r.i32();
    const uint32_t nc = r.u32();
    for (uint32_t i = 0; i < nc; ++i) s.class_ids.push_back(r.i32());
    for (int l = 0; l < s.layers; ++l) {
        std::array<LoraPair, 4> layer;
        for (auto& pair : layer) {
            pair.rank = s.rank;
            pair.down = r.tensor(true);
            pair.up = r.tensor(true);
        }
        s.lora.push_back(std::move(layer));
    }
    s.head_w = r.tensor(true);
    s.head_b = r.tensor(true);
    return s;
}

void write_router(Writer& w, const RouterBank& router, const GateMap& gm) {
    w.u32(static_cast<uint32_t>(router.aes.size()));
    for (const auto& ae : router.aes) {
        w.u8(ae.deep ? 1 : 0);
        w.i32(ae.input_dim);
        w.i32(ae.latent);
        w.i32(ae.hidden);
        w.u32(static_cast<uint32_t>(ae.ws.size()));
        for (const auto& t : ae.ws) w.tensor(t);
        w.u32(static_cast<uint32_t>(ae.bs.size()));
        for (const auto& t : ae.bs) w.tensor(t);
    }
    w.u32(static_cast<uint32_t>(gm.table.size()));
    for (int v : gm.table) w.i32(v);
}

void read_router(Reader& r, RouterBank& router, GateMap& gm) {
    const uint32_t n = r.u32();
    for (uint32_t i = 0; i < n; ++i) {
        TaskAutoencoder ae;
        ae.deep = r.u8() != 0;
        ae.input_dim = r.i32();
        ae.latent = r.i32();
        ae.hidden = r.i32();
        const uint32_t nw = r.u32();
        for (uint32_t k = 0; k < nw; ++k) ae.ws.push_back(r.tensor(true));
        const uint32_t nb = r.u32();
        for (uint32_t k = 0; k < nb; ++k) ae.bs.push_back(r.tensor(true));
        router.aes.push_back(std::move(ae));
    }
    const uint32_t gn = r.u32();
    for (uint32_t i = 0; i < gn; ++i) gm.table.push_back(r.i32());
}

void write_memory(Writer& w, const ReplayMemory& mem) {
    w.i32(mem.budget_m);
    w.u32(static_cast<uint32_t>(mem.tasks.size()));
    for (const auto& task : mem.tasks) {
        w.u32(static_cast<uint32_t>(task.size()));
        for (const auto& item : task) {
            w.tensor(item.tokens);
            w.i32(item.label);
            w.u32(static_cast<uint32_t>(item.latent.size()));
            for (real v : item.latent) w.f32(static_cast<float>(v));
        }
    }
}

void read_memory(Reader& r, ReplayMemory& mem) {
    mem.budget_m = r.i32();
    const uint32_t nt = r.u32();
    for (uint32_t t = 0; t < nt; ++t) {
        std::vector<ReplayItem> items;
        const uint32_t ni = r.u32();
        for (uint32_t i = 0; i < ni; ++i) {
            ReplayItem item;
            item.tokens = r.tensor(false);
            item.label = r.i32();
            const uint32_t nl = r.u32();
            for (uint32_t k = 0; k < nl; ++k) item.latent.push_back(static_cast<real>(r.f32()));
            items.push_back(std::move(item));
        }
        mem.tasks.push_back(std::move(items));
    }
}

}  // namespace

// Grants the codec access to the bank's slot storage and id counter.
struct CheckpointCodec {
    static void write_bank(Writer& w, const AdapterBank& bank) {
        w.i32(bank.capacity_);
        w.i32(bank.next_id_);
        w.u32(static_cast<uint32_t>(bank.slots_.size()));
        for (const auto& s : bank.slots_) write_slot(w, s);
    }
    static AdapterBank read_bank(Reader& r) {
        const int capacity = r.i32();
        if (capacity == 0) throw CheckpointError("adapters section carries an invalid capacity of 0");
        const int next_id = r.i32();
        const uint32_t n = r.u32();
        AdapterBank bank(capacity);
        bank.next_id_ = next_id;
        for (uint32_t i = 0; i < n; ++i) bank.slots_.push_back(read_slot(r));
        return bank;
    }
};

std::string encode_checkpoint(const ContinualState& state, const ExperimentConfig& config) {
    Writer out;
    out.bytes(kCheckpointMagic, 4);
    out.u32(kCheckpointVersion);

    const auto section = [&out](const std::string& name, const std::string& payload) {
        out.str(name);
        out.u64(payload.size());
        out.bytes(payload.data(), payload.size());
        out.u64(fnv1a64(payload.data(), payload.size()));
    };

    out.u32(5);
    section("config", config.to_kv());
    {
        Writer w;
        write_backbone(w, state.backbone);
        section("backbone", w.buf);
    }
    {
        Writer w;
        CheckpointCodec::write_bank(w, state.bank);
        section("adapters", w.buf);
    }
    {
        Writer w;
        write_router(w, state.router, state.gate_map);
        section("router", w.buf);
    }
    {
        Writer w;
        write_memory(w, state.memory);
        section("memory", w.buf);
    }
    return std::move(out.buf);
}

LoadedCheckpoint decode_checkpoint(const std::string& bytes) {
    Reader r{bytes};
    char magic[4];
    r.bytes(magic, 4);
    if (std::memcmp(magic, kCheckpointMagic, 4) != 0) {
        throw CheckpointError("not a checkpoint: bad magic bytes");
    }
    const uint32_t version = r.u32();
    if (version != kCheckpointVersion) {
        throw CheckpointError("unsupported checkpoint version " + std::to_string(version) +
                              ", this build reads version " + std::to_string(kCheckpointVersion));
    }
    const uint32_t n_sections = r.u32();

    LoadedCheckpoint loaded;
    bool seen_config = false, seen_backbone = false, seen_adapters = false, seen_router = false,
         seen_memory = false;
    for (uint32_t s = 0; s < n_sections; ++s) {
        r.section = "directory";
        const std::string name = r.str();
        r.section = name;
        const uint64_t len = r.u64();
        r.need(len);
        const std::string payload(bytes.data() + r.pos, len);
        r.pos += len;
        const uint64_t stored = r.u64();
        if (fnv1a64(payload.data(), payload.size()) != stored) {
            throw CheckpointError("section '" + name + "' failed its digest check");
        }
        Reader pr{payload};
        pr.section = name;
        if (name == "config") {
            loaded.config = ExperimentConfig::from_kv(payload);
            seen_config = true;
        } else if (name == "backbone") {
            loaded.state.backbone = read_backbone(pr);
            seen_backbone = true;
        } else if (name == "adapters") {
            loaded.state.bank = CheckpointCodec::read_bank(pr);
            seen_adapters = true;
        } else if (name == "router") {
            read_router(pr, loaded.state.router, loaded.state.gate_map);
            seen_router = true;
        } else if (name == "memory") {
            read_memory(pr, loaded.state.memory);
            seen_memory = true;
        } else {
            throw CheckpointError("unknown checkpoint section '" + name + "'");
        }
    }
    if (!seen_config || !seen_backbone || !seen_adapters || !seen_router || !seen_memory) {
        throw CheckpointError("checkpoint is missing a required section");
    }
    return loaded;
}

void save_checkpoint(const ContinualState& state, const ExperimentConfig& config,
                     const std::string& path) {
    const std::string bytes = encode_checkpoint(state, config);
    std::ofstream f(path, std::ios::binary);
    if (!f) throw CheckpointError("cannot open " + path + " for writing");
    f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!f) throw CheckpointError("failed writing checkpoint to " + path);
}

LoadedCheckpoint load_checkpoint(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw CheckpointError("cannot open checkpoint " + path);
    std::string bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
    return decode_checkpoint(bytes);
}

}  // namespace rtcl
