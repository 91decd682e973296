#include "autovarp/plan.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <set>
#include <sstream>

#include <json.hpp>

namespace avp {

using ojson = nlohmann::ordered_json;

namespace {

// Path-tracked view into a JSON document, so every schema error can name the
// exact field it refers to.
struct Cursor {
    const ojson* node;
    std::string path;

    Cursor child(const std::string& key) const {
        auto it = node->find(key);
        if (it == node->end())
            throw SchemaError("missing field '" + path + "/" + key + "'");
        return Cursor{&*it, path + "/" + key};
    }

    std::optional<Cursor> maybe(const std::string& key) const {
        auto it = node->find(key);
        if (it == node->end()) return std::nullopt;
        return Cursor{&*it, path + "/" + key};
    }

    void restrict_keys(const std::set<std::string>& allowed) const {
        for (auto it = node->begin(); it != node->end(); ++it)
            if (!allowed.count(it.key()))
                throw SchemaError("unknown field '" + path + "/" + it.key() + "'");
    }

    bool is_null() const { return node->is_null(); }

    double number() const {
        if (!node->is_number()) throw SchemaError("field '" + path + "' must be a number");
        return node->get<double>();
    }

    int integer() const {
        if (!node->is_number_integer()) throw SchemaError("field '" + path + "' must be an integer");
        return node->get<int>();
    }

    std::string str() const {
        if (!node->is_string()) throw SchemaError("field '" + path + "' must be a string");
        return node->get<std::string>();
    }

    bool object() const { return node->is_object(); }

    std::array<double, 3> vec3() const {
        if (!node->is_array() || node->size() != 3)
            throw SchemaError("field '" + path + "' must be an array of 3 numbers");
        std::array<double, 3> v{};
        for (int i = 0; i < 3; ++i) {
            if (!(*node)[i].is_number())
                throw SchemaError("field '" + path + "' must be an array of 3 numbers");
            v[i] = (*node)[i].get<double>();
        }
        return v;
    }
};

void check_version(const Cursor& c) {
    auto v = c.child("version");
    if (!v.node->is_number_integer() || v.node->get<int>() != kPlanVersion)
        throw SchemaError("field '" + v.path + "' must equal " + std::to_string(kPlanVersion));
}

std::optional<double> opt_number(const Cursor& c) {
    if (c.is_null()) return std::nullopt;
    return c.number();
}

VelocityTriple parse_velocity_triple(const Cursor& c, bool require_values) {
    c.restrict_keys({"vf", "vs", "vn"});
    VelocityTriple v;
    v.vf = opt_number(c.child("vf"));
    v.vs = opt_number(c.child("vs"));
    v.vn = opt_number(c.child("vn"));
    if (require_values) {
        for (auto [val, name] : {std::pair{v.vf, "vf"}, {v.vs, "vs"}, {v.vn, "vn"}}) {
            if (!val) throw SchemaError("field '" + c.path + "/" + name + "' must not be null");
            if (*val <= 0) throw SchemaError("field '" + c.path + "/" + name + "' must be > 0");
        }
    }
    return v;
}

FunctionDef parse_function(const Cursor& c) {
    c.restrict_keys({"model", "model_par", "plugins", "plugins_par", "initialization",
                     "conductivity", "conduction_velocity"});
    FunctionDef f;
    f.model = c.child("model").str();

    if (auto mp = c.maybe("model_par"); mp && !mp->is_null()) {
        if (!mp->object()) throw SchemaError("field '" + mp->path + "' must be null or an object");
        for (auto it = mp->node->begin(); it != mp->node->end(); ++it) {
            if (!it->is_number())
                throw SchemaError("field '" + mp->path + "/" + it.key() + "' must be a number");
            f.model_par[it.key()] = it->get<double>();
        }
    }
    if (auto p = c.maybe("plugins")) {
        if (!p->is_null()) throw SchemaError("field '" + p->path + "' is not supported (must be null)");
        f.has_plugins_keys = true;
    }
    if (auto p = c.maybe("plugins_par"); p && !p->is_null())
        throw SchemaError("field '" + p->path + "' is not supported (must be null)");

    auto init = c.child("initialization");
    init.restrict_keys({"num_cycles", "bcl", "init", "apdres_file", "apdres_protocol"});
    f.initialization.num_cycles = init.child("num_cycles").integer();
    f.initialization.bcl = init.child("bcl").number();
    if (f.initialization.num_cycles < 1)
        throw SchemaError("field '" + init.path + "/num_cycles' must be >= 1");
    if (f.initialization.bcl <= 0) throw SchemaError("field '" + init.path + "/bcl' must be > 0");
    if (auto i = init.maybe("init"); i && !i->is_null()) f.initialization.init = i->str();
    if (auto a = init.maybe("apdres_file"); a && !a->is_null()) f.initialization.apdres_file = a->str();
    if (auto a = init.maybe("apdres_protocol"); a && !a->is_null())
        f.initialization.apdres_protocol = a->str();

    auto g = c.child("conductivity");
    g.restrict_keys({"gil", "gel", "git", "get", "gin", "gen", "surf2vol"});
    f.conductivity.gil = g.child("gil").number();
    f.conductivity.gel = g.child("gel").number();
    f.conductivity.git = g.child("git").number();
    f.conductivity.get = g.child("get").number();
    f.conductivity.gin = g.child("gin").number();
    f.conductivity.gen = g.child("gen").number();
    f.conductivity.surf2vol = g.child("surf2vol").number();
    for (auto [val, name] :
         {std::pair{f.conductivity.gil, "gil"}, {f.conductivity.gel, "gel"},
          {f.conductivity.git, "git"}, {f.conductivity.get, "get"},
          {f.conductivity.gin, "gin"}, {f.conductivity.gen, "gen"},
          {f.conductivity.surf2vol, "surf2vol"}}) {
        if (val <= 0) throw SchemaError("field '" + g.path + "/" + name + "' must be > 0");
    }

    auto cv = c.child("conduction_velocity");
    cv.restrict_keys({"reference", "measured"});
    f.reference_velocity = parse_velocity_triple(cv.child("reference"), true);
    f.measured_velocity = parse_velocity_triple(cv.child("measured"), false);
    return f;
}

ProtocolDef parse_protocol(const std::string& name, const Cursor& c) {
    c.restrict_keys({"propagation", "num_cycles", "bcl", "electrodes", "rel_timings", "lat_file",
                     "restart"});
    ProtocolDef p;
    p.name = name;
    const std::string prop = c.child("propagation").str();
    if (prop == "rd")
        p.propagation = Propagation::rd;
    else if (prop == "ek")
        p.propagation = Propagation::ek;
    else
        throw SchemaError("field '" + c.path + "/propagation' must be \"rd\" or \"ek\"");
    p.num_cycles = c.child("num_cycles").integer();
    if (p.num_cycles < 1) throw SchemaError("field '" + c.path + "/num_cycles' must be >= 1");
    p.bcl = c.child("bcl").number();
    if (p.bcl <= 0) throw SchemaError("field '" + c.path + "/bcl' must be > 0");
    p.electrode = c.child("electrodes").str();
    for (const char* key : {"rel_timings", "lat_file", "restart"}) {
        if (auto f = c.maybe(key)) {
            if (!f->is_null())
                throw SchemaError("field '" + f->path + "' is not supported (must be null)");
            p.has_legacy_nulls = true;
        }
    }
    return p;
}

ElectrodeDef parse_electrode(const Cursor& c) {
    ElectrodeDef e;
    const std::string type = c.child("type").str();
    if (type == "cartesian_sphere") {
        c.restrict_keys({"type", "center", "radius"});
        e.kind = ElectrodeKind::cartesian_sphere;
        e.center = c.child("center").vec3();
        e.radius = c.child("radius").number();
        if (e.radius <= 0) throw SchemaError("field '" + c.path + "/radius' must be > 0");
    } else if (type == "node_list") {
        c.restrict_keys({"type", "nodes"});
        e.kind = ElectrodeKind::node_list;
        auto n = c.child("nodes");
        if (!n.node->is_array() || n.node->empty())
            throw SchemaError("field '" + n.path + "' must be a non-empty array of node ids");
        for (const auto& id : *n.node) {
            if (!id.is_number_integer() || id.get<long long>() < 0)
                throw SchemaError("field '" + n.path + "' must contain non-negative integers");
            e.nodes.push_back(id.get<std::size_t>());
        }
    } else if (type == "ucc_sphere") {
        c.restrict_keys({"type", "p0", "cavity", "radius", "searchdom"});
        e.kind = ElectrodeKind::ucc_sphere;
        e.p0 = c.child("p0").vec3();
        e.cavity = c.child("cavity").str();
        if (e.cavity != "lv" && e.cavity != "rv")
            throw SchemaError("field '" + c.path + "/cavity' must be \"lv\" or \"rv\"");
        e.radius = c.child("radius").number();
        if (e.radius <= 0) throw SchemaError("field '" + c.path + "/radius' must be > 0");
        e.searchdom = c.child("searchdom").str();
        if (e.searchdom != "cxyz")
            throw SchemaError("field '" + c.path + "/searchdom' must be \"cxyz\"");
    } else {
        throw SchemaError("field '" + c.path + "/type' must be one of cartesian_sphere, node_list, ucc_sphere");
    }
    return e;
}

ConfigurationDef parse_configuration(const Cursor& c) {
    c.restrict_keys({"tags", "func"});
    ConfigurationDef cfg;
    auto tags = c.child("tags");
    if (!tags.node->is_array() || tags.node->empty())
        throw SchemaError("field '" + tags.path + "' must be a non-empty array of integers");
    for (const auto& t : *tags.node) {
        if (!t.is_number_integer())
            throw SchemaError("field '" + tags.path + "' must contain integers");
        cfg.tags.push_back(t.get<int>());
    }
    cfg.func = c.child("func").str();
    return cfg;
}

SolverSetup parse_solver_setup(const Cursor& c) {
    c.restrict_keys({"dt", "output_interval", "diffusion_scheme", "linear_tolerance", "stimulus",
                     "sentinel"});
    SolverSetup s;
    s.dt = c.child("dt").number();
    if (s.dt <= 0) throw SchemaError("field '" + c.path + "/dt' must be > 0");
    s.output_interval = c.child("output_interval").number();
    const double ratio = s.output_interval / s.dt;
    if (s.output_interval <= 0 || std::abs(ratio - std::round(ratio)) > 1e-9)
        throw SchemaError("field '" + c.path +
                          "/output_interval' must be a positive integer multiple of dt");
    const std::string scheme = c.child("diffusion_scheme").str();
    if (scheme == "implicit_euler")
        s.diffusion_scheme = DiffusionScheme::implicit_euler;
    else if (scheme == "crank_nicolson")
        s.diffusion_scheme = DiffusionScheme::crank_nicolson;
    else
        throw SchemaError("field '" + c.path +
                          "/diffusion_scheme' must be \"implicit_euler\" or \"crank_nicolson\"");
    s.linear_tolerance = c.child("linear_tolerance").number();
    if (s.linear_tolerance <= 0 || s.linear_tolerance >= 1)
        throw SchemaError("field '" + c.path + "/linear_tolerance' must be in (0,1)");
    auto st = c.child("stimulus");
    st.restrict_keys({"strength", "duration"});
    s.stimulus.strength = st.child("strength").number();
    s.stimulus.duration = st.child("duration").number();
    if (s.stimulus.strength <= 0) throw SchemaError("field '" + st.path + "/strength' must be > 0");
    if (s.stimulus.duration <= 0) throw SchemaError("field '" + st.path + "/duration' must be > 0");
    if (auto sn = c.maybe("sentinel")) {
        sn->restrict_keys({"upstroke_threshold", "quiescence_window", "poll_interval"});
        if (auto v = sn->maybe("upstroke_threshold")) s.sentinel.upstroke_threshold = v->number();
        if (auto v = sn->maybe("quiescence_window")) s.sentinel.quiescence_window = v->number();
        if (auto v = sn->maybe("poll_interval")) s.sentinel.poll_interval = v->number();
        if (s.sentinel.quiescence_window <= 0)
            throw SchemaError("field '" + sn->path + "/quiescence_window' must be > 0");
        if (s.sentinel.poll_interval <= 0)
            throw SchemaError("field '" + sn->path + "/poll_interval' must be > 0");
    }
    return s;
}

ojson parse_file(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw IOError("cannot open '" + path.string() + "'");
    try {
        return ojson::parse(in);
    } catch (const nlohmann::json::parse_error& e) {
        throw ParseError("malformed JSON in '" + path.string() + "': " + e.what());
    }
}

std::map<std::string, ElectrodeDef> parse_electrode_section(const Cursor& c) {
    c.restrict_keys({"version", "definitions"});
    check_version(c);
    std::map<std::string, ElectrodeDef> out;
    auto defs = c.child("definitions");
    for (auto it = defs.node->begin(); it != defs.node->end(); ++it)
        out[it.key()] = parse_electrode(Cursor{&*it, defs.path + "/" + it.key()});
    return out;
}

std::map<std::string, ConfigurationDef> parse_configuration_section(const Cursor& c) {
    c.restrict_keys({"version", "definitions"});
    check_version(c);
    std::map<std::string, ConfigurationDef> out;
    auto defs = c.child("definitions");
    for (auto it = defs.node->begin(); it != defs.node->end(); ++it)
        out[it.key()] = parse_configuration(Cursor{&*it, defs.path + "/" + it.key()});
    return out;
}

std::vector<ProtocolDef> parse_protocol_section(const Cursor& c) {
    c.restrict_keys({"version", "prepacing"});
    check_version(c);
    std::vector<ProtocolDef> out;
    auto defs = c.child("prepacing");
    for (auto it = defs.node->begin(); it != defs.node->end(); ++it)
        out.push_back(parse_protocol(it.key(), Cursor{&*it, defs.path + "/" + it.key()}));
    return out;
}

void validate_cross_references(const Plan& plan) {
    for (const auto& p : plan.protocols)
        if (!plan.electrodes.count(p.electrode))
            throw ReferenceError("protocol '" + p.name + "' references unknown electrode '" +
                                 p.electrode + "'");
    std::map<int, std::string> tag_owner;
    for (const auto& [name, cfg] : plan.configurations) {
        if (cfg.func != kScarFunc && !plan.functions.count(cfg.func))
            throw ReferenceError("configuration '" + name + "' references unknown function '" +
                                 cfg.func + "'");
        for (int t : cfg.tags) {
            auto [it, inserted] = tag_owner.emplace(t, name);
            if (!inserted)
                throw SchemaError("tag " + std::to_string(t) + " claimed by both configuration '" +
                                  it->second + "' and '" + name + "'");
        }
    }
}

// --- serialization ---

ojson velocity_json(const VelocityTriple& v) {
    ojson j;
    j["vf"] = v.vf ? ojson(*v.vf) : ojson(nullptr);
    j["vn"] = v.vn ? ojson(*v.vn) : ojson(nullptr);
    j["vs"] = v.vs ? ojson(*v.vs) : ojson(nullptr);
    return j;
}

ojson function_json(const FunctionDef& f) {
    ojson j;
    ojson cond;
    cond["gel"] = f.conductivity.gel;
    cond["gen"] = f.conductivity.gen;
    cond["get"] = f.conductivity.get;
    cond["gil"] = f.conductivity.gil;
    cond["gin"] = f.conductivity.gin;
    cond["git"] = f.conductivity.git;
    cond["surf2vol"] = f.conductivity.surf2vol;

    ojson cv;
    cv["measured"] = velocity_json(f.measured_velocity);
    cv["reference"] = velocity_json(f.reference_velocity);

    ojson init;
    if (f.initialization.apdres_file) init["apdres_file"] = *f.initialization.apdres_file;
    else init["apdres_file"] = nullptr;
    if (f.initialization.apdres_protocol) init["apdres_protocol"] = *f.initialization.apdres_protocol;
    else init["apdres_protocol"] = nullptr;
    init["bcl"] = f.initialization.bcl;
    init["init"] = f.initialization.init ? ojson(*f.initialization.init) : ojson(nullptr);
    init["num_cycles"] = f.initialization.num_cycles;

    j["conduction_velocity"] = cv;
    j["conductivity"] = cond;
    j["initialization"] = init;
    j["model"] = f.model;
    j["model_par"] = f.model_par.empty() ? ojson(nullptr) : ojson(f.model_par);
    if (f.has_plugins_keys) {
        j["plugins"] = nullptr;
        j["plugins_par"] = nullptr;
    }
    return j;
}

ojson protocol_json(const ProtocolDef& p) {
    ojson j;
    j["bcl"] = p.bcl;
    j["electrodes"] = p.electrode;
    if (p.has_legacy_nulls) {
        j["lat_file"] = nullptr;
    }
    j["num_cycles"] = p.num_cycles;
    j["propagation"] = to_string(p.propagation);
    if (p.has_legacy_nulls) {
        j["rel_timings"] = nullptr;
        j["restart"] = nullptr;
    }
    return j;
}

ojson electrode_json(const ElectrodeDef& e) {
    ojson j;
    switch (e.kind) {
        case ElectrodeKind::cartesian_sphere:
            j["center"] = e.center;
            j["radius"] = e.radius;
            j["type"] = "cartesian_sphere";
            break;
        case ElectrodeKind::node_list:
            j["nodes"] = e.nodes;
            j["type"] = "node_list";
            break;
        case ElectrodeKind::ucc_sphere:
            j["cavity"] = e.cavity;
            j["p0"] = e.p0;
            j["radius"] = e.radius;
            j["searchdom"] = e.searchdom;
            j["type"] = "ucc_sphere";
            break;
    }
    return j;
}

ojson configuration_json(const ConfigurationDef& c) {
    ojson j;
    j["func"] = c.func;
    j["tags"] = c.tags;
    return j;
}

ojson solver_json(const SolverSetup& s) {
    ojson j;
    j["diffusion_scheme"] = to_string(s.diffusion_scheme);
    j["dt"] = s.dt;
    j["linear_tolerance"] = s.linear_tolerance;
    j["output_interval"] = s.output_interval;
    ojson sn;
    sn["poll_interval"] = s.sentinel.poll_interval;
    sn["quiescence_window"] = s.sentinel.quiescence_window;
    sn["upstroke_threshold"] = s.sentinel.upstroke_threshold;
    j["sentinel"] = sn;
    ojson st;
    st["duration"] = s.stimulus.duration;
    st["strength"] = s.stimulus.strength;
    j["stimulus"] = st;
    return j;
}

ojson plan_json(const Plan& plan) {
    ojson root;
    // Lexicographic section order; maps emitted sorted (std::map iteration),
    // protocols kept in definition order because it fixes execution order.
    ojson cfg;
    cfg["definitions"] = ojson::object();
    for (const auto& [name, c] : plan.configurations) cfg["definitions"][name] = configuration_json(c);
    cfg["version"] = plan.version;
    root["configurations"] = cfg;

    ojson el;
    el["definitions"] = ojson::object();
    for (const auto& [name, e] : plan.electrodes) el["definitions"][name] = electrode_json(e);
    el["version"] = plan.version;
    root["electrodes"] = el;

    ojson fn;
    fn["definitions"] = ojson::object();
    for (const auto& [name, f] : plan.functions) fn["definitions"][name] = function_json(f);
    fn["version"] = plan.version;
    root["functions"] = fn;

    ojson pr;
    pr["prepacing"] = ojson::object();
    for (const auto& p : plan.protocols) pr["prepacing"][p.name] = protocol_json(p);
    pr["version"] = plan.version;
    root["protocols"] = pr;

    root["solver_setup"] = solver_json(plan.solver_setup);
    return root;
}

}  // namespace

const ProtocolDef* Plan::find_protocol(const std::string& name) const {
    for (const auto& p : protocols)
        if (p.name == name) return &p;
    return nullptr;
}

Plan load_plan(const std::filesystem::path& path) {
    const ojson doc = parse_file(path);
    Cursor root{&doc, ""};
    if (!root.object()) throw SchemaError("plan root must be an object");
    root.restrict_keys({"functions", "protocols", "electrodes", "configurations", "solver_setup"});

    Plan plan;
    auto fns = root.child("functions");
    fns.restrict_keys({"version", "definitions"});
    check_version(fns);
    auto defs = fns.child("definitions");
    for (auto it = defs.node->begin(); it != defs.node->end(); ++it)
        plan.functions[it.key()] = parse_function(Cursor{&*it, defs.path + "/" + it.key()});

    plan.protocols = parse_protocol_section(root.child("protocols"));
    plan.electrodes = parse_electrode_section(root.child("electrodes"));
    plan.configurations = parse_configuration_section(root.child("configurations"));
    plan.solver_setup = parse_solver_setup(root.child("solver_setup"));

    validate_cross_references(plan);
    return plan;
}

std::string serialize_plan(const Plan& plan) {
    return plan_json(plan).dump(2) + "\n";
}

void save_plan(const Plan& plan, const std::filesystem::path& path) {
    std::ofstream out(path);
    if (!out) throw IOError("cannot write '" + path.string() + "'");
    out << serialize_plan(plan);
    if (!out) throw IOError("write failed for '" + path.string() + "'");
}

Plan merge_subject_overrides(const Plan& plan, const std::filesystem::path& subject_dir,
                             const std::string& electrodes_file,
                             const std::string& configurations_file) {
    if (!std::filesystem::is_directory(subject_dir))
        throw IOError("subject directory '" + subject_dir.string() + "' does not exist");
    Plan merged = plan;

    if (!electrodes_file.empty()) {
        const auto path = subject_dir / electrodes_file;
        if (std::filesystem::exists(path)) {
            const ojson doc = parse_file(path);
            auto overrides = parse_electrode_section(Cursor{&doc, ""});
            for (auto& [name, e] : overrides) merged.electrodes[name] = e;
        }
    }
    if (!configurations_file.empty()) {
        const auto path = subject_dir / configurations_file;
        if (std::filesystem::exists(path)) {
            const ojson doc = parse_file(path);
            auto overrides = parse_configuration_section(Cursor{&doc, ""});
            for (auto& [name, c] : overrides) merged.configurations[name] = c;
        }
    }
    validate_cross_references(merged);
    return merged;
}

std::vector<ProtocolDef> load_protocols(const std::filesystem::path& path, const Plan& plan) {
    const ojson doc = parse_file(path);
    auto protocols = parse_protocol_section(Cursor{&doc, ""});
    if (protocols.empty()) throw SchemaError("no protocols defined in '" + path.string() + "'");
    for (const auto& p : protocols)
        if (!plan.electrodes.count(p.electrode))
            throw ReferenceError("protocol '" + p.name + "' references unknown electrode '" +
                                 p.electrode + "'");
    return protocols;
}

void write_measured_velocities(const std::filesystem::path& plan_path, const std::string& function,
                               const VelocityTriple& measured) {
    Plan plan = load_plan(plan_path);
    auto it = plan.functions.find(function);
    if (it == plan.functions.end())
        throw UnknownFunction("function '" + function + "' not defined in '" + plan_path.string() +
                              "'");
    it->second.measured_velocity = measured;
    save_plan(plan, plan_path);
}

const char* to_string(Propagation p) {
    return p == Propagation::rd ? "rd" : "ek";
}

const char* to_string(ElectrodeKind k) {
    switch (k) {
        case ElectrodeKind::cartesian_sphere: return "cartesian_sphere";
        case ElectrodeKind::node_list: return "node_list";
        case ElectrodeKind::ucc_sphere: return "ucc_sphere";
    }
    return "?";
}

const char* to_string(DiffusionScheme s) {
    return s == DiffusionScheme::implicit_euler ? "implicit_euler" : "crank_nicolson";
}

}  // namespace avp
