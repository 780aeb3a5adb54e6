//! Long-format choice CSVs, per-occasion context CSVs and the JSON model
//! configuration that binds columns to roles.

use std::collections::{BTreeSet, HashMap};
use std::io::{Read, Write};
use std::path::Path;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ChoiceDataset, ChoiceOccasion, ContextKind, ContextVector, Individual};
use crate::priors::PriorConfig;
use crate::vi::{FitConfig, ModelKind, NetworkSpec};

/// Reserved columns of the choices file.
pub const INDIVIDUAL_ID: &str = "individual_id";
pub const OCCASION_ID: &str = "occasion_id";
pub const ALT_ID: &str = "alt_id";
pub const CHOSEN: &str = "chosen";
pub const AVAILABLE: &str = "available";

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Coefficient {
    #[default]
    Fixed,
    Random,
}

/// Attribute read from a CSV column.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttributeDecl {
    pub name: String,
    #[serde(default)]
    pub coefficient: Coefficient,
}

/// Alternative-specific constant: indicator of `alternative` (an `alt_id`).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AscDecl {
    pub name: String,
    pub alternative: String,
    #[serde(default)]
    pub coefficient: Coefficient,
}

/// Path-size overlap term: `column` holds `PS` in (0, 1]; the model uses
/// `ln PS` as a fixed-coefficient attribute called `name`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PathSizeDecl {
    pub column: String,
    #[serde(default = "default_ps_name")]
    pub name: String,
}

fn default_ps_name() -> String {
    "ln_path_size".into()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ContextDecl {
    pub name: String,
    pub kind: ContextKind,
}

/// `attribute * context` column for the interaction baseline.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InteractionDecl {
    pub attribute: String,
    pub context: String,
    #[serde(default)]
    pub coefficient: Coefficient,
}

impl InteractionDecl {
    pub fn column_name(&self) -> String {
        format!("{}_x_{}", self.attribute, self.context)
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StandardizeDecl {
    /// Attribute columns to z-score.
    pub attributes: Vec<String>,
    /// Continuous context columns to z-score.
    pub context: Vec<String>,
}

/// Scalar prior hyperparameters broadcast to the model dimensions.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PriorSettings {
    pub fixed_mean: f64,
    pub fixed_variance: f64,
    pub random_mean: f64,
    pub random_variance: f64,
    pub halfcauchy_scale: f64,
    pub lkj_eta: f64,
    pub sigma_c: f64,
}

impl Default for PriorSettings {
    fn default() -> Self {
        let d = PriorConfig::default_for(0, 0);
        Self {
            fixed_mean: 0.0,
            fixed_variance: 100.0,
            random_mean: 0.0,
            random_variance: 100.0,
            halfcauchy_scale: d.halfcauchy_scale,
            lkj_eta: d.lkj_eta,
            sigma_c: d.sigma_c,
        }
    }
}

impl PriorSettings {
    pub fn build(&self, n_fixed: usize, n_random: usize) -> Result<PriorConfig> {
        let p = PriorConfig {
            lambda0: vec![self.fixed_mean; n_fixed],
            xi0_diag: vec![self.fixed_variance; n_fixed],
            mu0: vec![self.random_mean; n_random],
            sigma0_diag: vec![self.random_variance; n_random],
            halfcauchy_scale: self.halfcauchy_scale,
            lkj_eta: self.lkj_eta,
            sigma_c: self.sigma_c,
        };
        p.validate(n_fixed, n_random)?;
        Ok(p)
    }
}

/// Binding of data columns to model roles plus estimation settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub model_kind: ModelKind,
    #[serde(default)]
    pub attributes: Vec<AttributeDecl>,
    #[serde(default)]
    pub ascs: Vec<AscDecl>,
    #[serde(default)]
    pub path_size: Option<PathSizeDecl>,
    #[serde(default)]
    pub context: Vec<ContextDecl>,
    #[serde(default)]
    pub interactions: Vec<InteractionDecl>,
    /// Choice-file columns deliberately left out of the model.
    #[serde(default)]
    pub ignore_columns: Vec<String>,
    #[serde(default)]
    pub standardize: StandardizeDecl,
    #[serde(default)]
    pub priors: PriorSettings,
    #[serde(default)]
    pub fit: FitConfig,
    #[serde(default)]
    pub network: NetworkSpec,
    #[serde(default)]
    pub variable_choice_set: bool,
}

impl ModelConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: ModelConfig = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Parameter columns in model order, before interactions: fixed block
    /// (attributes, ASCs, path size) then random block (attributes, ASCs).
    fn base_columns(&self) -> (Vec<String>, Vec<String>) {
        let mut fixed = Vec::new();
        let mut random = Vec::new();
        for a in &self.attributes {
            match a.coefficient {
                Coefficient::Fixed => fixed.push(a.name.clone()),
                Coefficient::Random => random.push(a.name.clone()),
            }
        }
        for a in &self.ascs {
            match a.coefficient {
                Coefficient::Fixed => fixed.push(a.name.clone()),
                Coefficient::Random => random.push(a.name.clone()),
            }
        }
        if let Some(ps) = &self.path_size {
            fixed.push(ps.name.clone());
        }
        (fixed, random)
    }

    /// Final parameter column labels, fixed block first.
    pub fn column_names(&self) -> Vec<String> {
        let (mut fixed, mut random) = self.base_columns();
        for i in &self.interactions {
            match i.coefficient {
                Coefficient::Fixed => fixed.push(i.column_name()),
                Coefficient::Random => random.push(i.column_name()),
            }
        }
        fixed.extend(random);
        fixed
    }

    pub fn n_fixed(&self) -> usize {
        let (fixed, _) = self.base_columns();
        fixed.len()
            + self.interactions.iter().filter(|i| i.coefficient == Coefficient::Fixed).count()
    }

    pub fn prior_config(&self) -> Result<PriorConfig> {
        let p = self.column_names().len();
        let l = self.n_fixed();
        self.priors.build(l, p - l)
    }

    pub fn validate(&self) -> Result<()> {
        let names = self.column_names();
        if names.is_empty() {
            return Err(Error::invalid("configuration declares no parameter columns"));
        }
        let mut seen = BTreeSet::new();
        let reserved = [INDIVIDUAL_ID, OCCASION_ID, ALT_ID, CHOSEN, AVAILABLE];
        let ctx_names: Vec<&str> = self.context.iter().map(|c| c.name.as_str()).collect();
        for n in names.iter().map(String::as_str).chain(ctx_names.iter().copied()) {
            if reserved.contains(&n) {
                return Err(Error::invalid(format!("'{n}' is a reserved column name")));
            }
            if !seen.insert(n) {
                return Err(Error::invalid(format!("column '{n}' is assigned more than one role")));
            }
        }
        for ig in &self.ignore_columns {
            if seen.contains(ig.as_str()) {
                return Err(Error::invalid(format!("ignored column '{ig}' is also assigned a role")));
            }
        }
        let (base, random) = self.base_columns();
        for i in &self.interactions {
            if !base.contains(&i.attribute) && !random.contains(&i.attribute) {
                return Err(Error::invalid(format!("interaction refers to unknown attribute '{}'", i.attribute)));
            }
            if !ctx_names.contains(&i.context.as_str()) {
                return Err(Error::invalid(format!("interaction refers to unknown context '{}'", i.context)));
            }
        }
        for s in &self.standardize.attributes {
            if !self.attributes.iter().any(|a| &a.name == s) {
                return Err(Error::invalid(format!("standardize refers to unknown attribute '{s}'")));
            }
        }
        for s in &self.standardize.context {
            match self.context.iter().find(|c| &c.name == s) {
                Some(c) if c.kind == ContextKind::Continuous => {}
                Some(_) => return Err(Error::invalid(format!("binary context '{s}' cannot be standardized"))),
                None => return Err(Error::invalid(format!("standardize refers to unknown context '{s}'"))),
            }
        }
        match self.model_kind {
            ModelKind::Mnl if names.len() != self.n_fixed() => {
                return Err(Error::invalid("an MNL configuration cannot declare random coefficients"))
            }
            ModelKind::Cmmnl if self.context.is_empty() => {
                return Err(Error::invalid("a context-aware configuration needs context columns"))
            }
            _ => {}
        }
        self.fit.validate()?;
        self.prior_config()?;
        Ok(())
    }

    /// Configuration that reads back every column of `data` with its
    /// current role and no derived columns. Continuous context columns are
    /// z-scored, since they feed the network.
    pub fn for_dataset(data: &ChoiceDataset, model_kind: ModelKind) -> Self {
        let attributes = data
            .column_names
            .iter()
            .enumerate()
            .map(|(i, name)| AttributeDecl {
                name: name.clone(),
                coefficient: if i < data.n_fixed { Coefficient::Fixed } else { Coefficient::Random },
            })
            .collect();
        let context = data
            .context_names
            .iter()
            .zip(&data.context_kinds)
            .map(|(name, kind)| ContextDecl { name: name.clone(), kind: *kind })
            .collect();
        Self {
            model_kind,
            attributes,
            ascs: vec![],
            path_size: None,
            context,
            interactions: vec![],
            ignore_columns: vec![],
            standardize: StandardizeDecl {
                attributes: vec![],
                context: data
                    .context_names
                    .iter()
                    .zip(&data.context_kinds)
                    .filter(|(_, k)| **k == ContextKind::Continuous)
                    .map(|(n, _)| n.clone())
                    .collect(),
            },
            priors: PriorSettings::default(),
            fit: FitConfig::default(),
            network: NetworkSpec::default(),
            variable_choice_set: data.variable_choice_set,
        }
    }
}

fn parse_num(text: &str, line: u64, column: &str) -> Result<f64> {
    let v: f64 = text
        .trim()
        .parse()
        .map_err(|_| Error::data(format!("line {line}, column '{column}': '{text}' is not a number")))?;
    if !v.is_finite() {
        return Err(Error::data(format!("line {line}, column '{column}': non-finite value '{text}'")));
    }
    Ok(v)
}

fn parse_flag(text: &str, line: u64, column: &str) -> Result<bool> {
    match text.trim() {
        "1" => Ok(true),
        "0" => Ok(false),
        other => Err(Error::data(format!("line {line}, column '{column}': expected 0 or 1, got '{other}'"))),
    }
}

fn header_index(headers: &csv::StringRecord, file: &str) -> Result<HashMap<String, usize>> {
    let mut idx = HashMap::new();
    for (i, h) in headers.iter().enumerate() {
        if idx.insert(h.trim().to_string(), i).is_some() {
            return Err(Error::data(format!("{file}: duplicate header '{h}'")));
        }
    }
    Ok(idx)
}

fn require(idx: &HashMap<String, usize>, name: &str, file: &str) -> Result<usize> {
    idx.get(name)
        .copied()
        .ok_or_else(|| Error::data(format!("{file}: missing column '{name}'")))
}

struct PendingOccasion {
    individual: String,
    first_line: u64,
    alt_ids: Vec<String>,
    rows: Vec<Vec<f64>>,
    path_size: Vec<f64>,
    availability: Vec<bool>,
    chosen_lines: Vec<(usize, u64)>,
}

/// Reads per-occasion context rows keyed by `occasion_id`.
pub fn read_context_csv<R: Read>(input: R, config: &ModelConfig) -> Result<HashMap<u64, (u64, Vec<f64>)>> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(input);
    let headers = rdr.headers()?.clone();
    let idx = header_index(&headers, "context file")?;
    let occ_col = require(&idx, OCCASION_ID, "context file")?;
    let cols: Vec<usize> = config
        .context
        .iter()
        .map(|c| require(&idx, &c.name, "context file"))
        .collect::<Result<_>>()?;
    let mut out = HashMap::new();
    for rec in rdr.records() {
        let rec = rec?;
        let line = rec.position().map_or(0, |p| p.line());
        let occ = rec[occ_col]
            .trim()
            .parse::<u64>()
            .map_err(|_| Error::data(format!("context file line {line}: bad occasion_id '{}'", &rec[occ_col])))?;
        let mut values = Vec::with_capacity(cols.len());
        for (c, decl) in cols.iter().zip(&config.context) {
            let v = parse_num(&rec[*c], line, &decl.name)?;
            if decl.kind == ContextKind::Binary && v != 0.0 && v != 1.0 {
                return Err(Error::data(format!(
                    "context file line {line}: binary column '{}' has value {v}",
                    decl.name
                )));
            }
            values.push(v);
        }
        if let Some((prev, _)) = out.insert(occ, (line, values)) {
            return Err(Error::data(format!(
                "context file: occasion {occ} appears on lines {prev} and {line}"
            )));
        }
    }
    Ok(out)
}

/// Builds a dataset from a long-format choices table and, when the
/// configuration declares context columns, a context table.
pub fn read_choice_csv<R: Read, C: Read>(
    choices: R,
    context: Option<C>,
    config: &ModelConfig,
) -> Result<ChoiceDataset> {
    config.validate()?;
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(choices);
    let headers = rdr.headers()?.clone();
    let idx = header_index(&headers, "choices file")?;
    let ind_col = require(&idx, INDIVIDUAL_ID, "choices file")?;
    let occ_col = require(&idx, OCCASION_ID, "choices file")?;
    let alt_col = require(&idx, ALT_ID, "choices file")?;
    let chosen_col = require(&idx, CHOSEN, "choices file")?;
    let avail_col = idx.get(AVAILABLE).copied();

    // Plain attribute columns in declaration order.
    let attr_cols: Vec<usize> = config
        .attributes
        .iter()
        .map(|a| require(&idx, &a.name, "choices file"))
        .collect::<Result<_>>()?;
    let ps_col = match &config.path_size {
        Some(ps) => Some(require(&idx, &ps.column, "choices file")?),
        None => None,
    };
    // Interaction columns present in the file are rebuilt, not read.
    let mut assigned: BTreeSet<String> =
        [INDIVIDUAL_ID, OCCASION_ID, ALT_ID, CHOSEN, AVAILABLE].map(String::from).into();
    assigned.extend(config.attributes.iter().map(|a| a.name.clone()));
    assigned.extend(config.ascs.iter().map(|a| a.name.clone()));
    assigned.extend(config.path_size.iter().map(|p| p.column.clone()));
    assigned.extend(config.interactions.iter().map(InteractionDecl::column_name));
    assigned.extend(config.ignore_columns.iter().cloned());
    for h in headers.iter() {
        if !assigned.contains(h.trim()) {
            return Err(Error::data(format!(
                "choices file column '{h}' has no role; list it under ignore_columns to skip it"
            )));
        }
    }

    let mut order: Vec<u64> = Vec::new();
    let mut pending: HashMap<u64, PendingOccasion> = HashMap::new();
    for rec in rdr.records() {
        let rec = rec?;
        let line = rec.position().map_or(0, |p| p.line());
        let occ_id = rec[occ_col]
            .trim()
            .parse::<u64>()
            .map_err(|_| Error::data(format!("line {line}: bad occasion_id '{}'", &rec[occ_col])))?;
        let individual = rec[ind_col].trim().to_string();
        if individual.is_empty() {
            return Err(Error::data(format!("line {line}: empty individual_id")));
        }
        let alt = rec[alt_col].trim().to_string();
        let entry = pending.entry(occ_id).or_insert_with(|| {
            order.push(occ_id);
            PendingOccasion {
                individual: individual.clone(),
                first_line: line,
                alt_ids: vec![],
                rows: vec![],
                path_size: vec![],
                availability: vec![],
                chosen_lines: vec![],
            }
        });
        if entry.individual != individual {
            return Err(Error::data(format!(
                "line {line}: occasion {occ_id} belongs to individual '{}' (line {}) but this row says '{individual}'",
                entry.individual, entry.first_line
            )));
        }
        if entry.alt_ids.contains(&alt) {
            return Err(Error::data(format!(
                "line {line}: duplicate alternative '{alt}' in occasion {occ_id}"
            )));
        }
        let values = attr_cols
            .iter()
            .zip(&config.attributes)
            .map(|(c, a)| parse_num(&rec[*c], line, &a.name))
            .collect::<Result<Vec<f64>>>()?;
        if let (Some(c), Some(decl)) = (ps_col, &config.path_size) {
            let ps = parse_num(&rec[c], line, &decl.column)?;
            if !(ps > 0.0 && ps <= 1.0) {
                return Err(Error::data(format!("line {line}: path size {ps} outside (0, 1]")));
            }
            entry.path_size.push(ps.ln());
        }
        let chosen = parse_flag(&rec[chosen_col], line, CHOSEN)?;
        let available = match avail_col {
            Some(c) => parse_flag(&rec[c], line, AVAILABLE)?,
            None => true,
        };
        if chosen {
            entry.chosen_lines.push((entry.alt_ids.len(), line));
        }
        entry.alt_ids.push(alt);
        entry.rows.push(values);
        entry.availability.push(available);
    }
    if order.is_empty() {
        return Err(Error::data("choices file has no rows"));
    }

    let contexts = match (config.context.is_empty(), context) {
        (true, _) => HashMap::new(),
        (false, Some(c)) => read_context_csv(c, config)?,
        (false, None) => return Err(Error::data("configuration declares context columns but no context file was given")),
    };
    if !config.context.is_empty() {
        let mut orphans: Vec<u64> = contexts.keys().filter(|k| !pending.contains_key(k)).copied().collect();
        if !orphans.is_empty() {
            orphans.sort_unstable();
            let (_, (line, _)) = contexts.get_key_value(&orphans[0]).expect("present");
            return Err(Error::data(format!(
                "context file line {line}: occasion {} does not appear in the choices file",
                orphans[0]
            )));
        }
    }

    let (fixed, random) = config.base_columns();
    let base_names: Vec<String> = fixed.iter().chain(&random).cloned().collect();
    let mut individuals: Vec<Individual> = Vec::new();
    let mut ind_pos: HashMap<String, usize> = HashMap::new();
    for occ_id in order {
        let p = pending.remove(&occ_id).expect("recorded");
        let chosen = match p.chosen_lines.as_slice() {
            [(pos, _)] => *pos,
            [] => {
                return Err(Error::data(format!(
                    "occasion {occ_id} (line {}): no chosen alternative",
                    p.first_line
                )))
            }
            many => {
                let lines: Vec<String> = many.iter().map(|(_, l)| l.to_string()).collect();
                return Err(Error::data(format!(
                    "occasion {occ_id}: several chosen rows on lines {}",
                    lines.join(", ")
                )));
            }
        };
        let j = p.alt_ids.len();
        let mut attributes = DMatrix::zeros(j, base_names.len());
        for (r, alt) in p.alt_ids.iter().enumerate() {
            for (c, name) in base_names.iter().enumerate() {
                attributes[(r, c)] = if let Some(ai) = config.attributes.iter().position(|a| &a.name == name) {
                    p.rows[r][ai]
                } else if let Some(asc) = config.ascs.iter().find(|a| &a.name == name) {
                    f64::from(u8::from(&asc.alternative == alt))
                } else {
                    p.path_size[r]
                };
            }
        }
        let ctx = if config.context.is_empty() {
            vec![]
        } else {
            match contexts.get(&occ_id) {
                Some((_, v)) => v.clone(),
                None => {
                    return Err(Error::data(format!(
                        "occasion {occ_id} (line {}): no row in the context file",
                        p.first_line
                    )))
                }
            }
        };
        let occasion = ChoiceOccasion {
            occasion_id: occ_id,
            alt_ids: p.alt_ids,
            attributes,
            availability: p.availability,
            log_path_size: None,
            context: ContextVector(ctx),
            chosen,
        };
        occasion
            .validate()
            .map_err(|e| Error::data(format!("{e} (first row on line {})", p.first_line)))?;
        let pos = *ind_pos.entry(p.individual.clone()).or_insert_with(|| {
            individuals.push(Individual { id: p.individual.clone(), occasions: vec![] });
            individuals.len() - 1
        });
        individuals[pos].occasions.push(occasion);
    }
    let base = ChoiceDataset {
        individuals,
        column_names: base_names,
        n_fixed: fixed.len(),
        context_names: config.context.iter().map(|c| c.name.clone()).collect(),
        context_kinds: config.context.iter().map(|c| c.kind).collect(),
        variable_choice_set: config.variable_choice_set,
    };
    base.validate()?;
    build_interactions(&base, &config.interactions)
}

/// Reads a dataset from files.
pub fn load_choice_csv(choices: &Path, context: Option<&Path>, config: &ModelConfig) -> Result<ChoiceDataset> {
    let c = std::fs::File::open(choices)
        .map_err(|e| Error::data(format!("cannot open {}: {e}", choices.display())))?;
    let x = match context {
        Some(p) => Some(
            std::fs::File::open(p).map_err(|e| Error::data(format!("cannot open {}: {e}", p.display())))?,
        ),
        None => None,
    };
    read_choice_csv(c, x, config)
}

/// Writes the long-format choices table with every parameter column.
pub fn write_choice_csv<W: Write>(data: &ChoiceDataset, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec![INDIVIDUAL_ID, OCCASION_ID, ALT_ID, CHOSEN, AVAILABLE];
    header.extend(data.column_names.iter().map(String::as_str));
    w.write_record(&header)?;
    for ind in &data.individuals {
        for occ in &ind.occasions {
            for (r, alt) in occ.alt_ids.iter().enumerate() {
                let mut row = vec![
                    ind.id.clone(),
                    occ.occasion_id.to_string(),
                    alt.clone(),
                    u8::from(r == occ.chosen).to_string(),
                    u8::from(occ.availability[r]).to_string(),
                ];
                row.extend((0..occ.attributes.ncols()).map(|c| occ.attributes[(r, c)].to_string()));
                w.write_record(&row)?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

/// Writes one row of context values per occasion.
pub fn write_context_csv<W: Write>(data: &ChoiceDataset, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec![OCCASION_ID];
    header.extend(data.context_names.iter().map(String::as_str));
    w.write_record(&header)?;
    for occ in data.occasions() {
        let mut row = vec![occ.occasion_id.to_string()];
        row.extend(occ.context.0.iter().map(|v| v.to_string()));
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

/// Appends `attribute * context` columns at the end of the fixed or random
/// block, depending on each declaration.
pub fn build_interactions(data: &ChoiceDataset, decls: &[InteractionDecl]) -> Result<ChoiceDataset> {
    if decls.is_empty() {
        return Ok(data.clone());
    }
    let mut names = data.column_names.clone();
    let mut fixed_new = Vec::new();
    let mut random_new = Vec::new();
    for d in decls {
        let a = data
            .column_names
            .iter()
            .position(|n| n == &d.attribute)
            .ok_or_else(|| Error::invalid(format!("interaction attribute '{}' not found", d.attribute)))?;
        let c = data
            .context_names
            .iter()
            .position(|n| n == &d.context)
            .ok_or_else(|| Error::invalid(format!("interaction context '{}' not found", d.context)))?;
        let name = d.column_name();
        if names.contains(&name) {
            return Err(Error::invalid(format!("interaction column '{name}' collides with an existing column")));
        }
        names.push(name.clone());
        match d.coefficient {
            Coefficient::Fixed => fixed_new.push((name, a, c)),
            Coefficient::Random => random_new.push((name, a, c)),
        }
    }
    let l = data.n_fixed;
    let p = data.n_params();
    // New column order: old fixed, new fixed, old random, new random.
    let mut sources: Vec<Source> = (0..l).map(Source::Old).collect();
    sources.extend(fixed_new.iter().map(|(_, a, c)| Source::Product(*a, *c)));
    sources.extend((l..p).map(Source::Old));
    sources.extend(random_new.iter().map(|(_, a, c)| Source::Product(*a, *c)));
    let mut column_names: Vec<String> = data.column_names[..l].to_vec();
    column_names.extend(fixed_new.iter().map(|(n, ..)| n.clone()));
    column_names.extend(data.column_names[l..].iter().cloned());
    column_names.extend(random_new.iter().map(|(n, ..)| n.clone()));

    let mut out = data.clone();
    out.column_names = column_names;
    out.n_fixed = l + fixed_new.len();
    for ind in &mut out.individuals {
        for occ in &mut ind.occasions {
            let old = &occ.attributes;
            let ctx = &occ.context.0;
            occ.attributes = DMatrix::from_fn(old.nrows(), sources.len(), |r, col| match sources[col] {
                Source::Old(i) => old[(r, i)],
                Source::Product(a, c) => old[(r, a)] * ctx[c],
            });
        }
    }
    Ok(out)
}

#[derive(Clone, Copy)]
enum Source {
    Old(usize),
    Product(usize, usize),
}

/// Location and scale applied to one column.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ColumnScaling {
    pub name: String,
    pub mean: f64,
    pub sd: f64,
}

/// Record of every z-scoring applied to a dataset.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ScalingRecord {
    pub attributes: Vec<ColumnScaling>,
    pub context: Vec<ColumnScaling>,
    /// Columns left alone because they have zero variance.
    pub skipped: Vec<String>,
}

impl ScalingRecord {
    /// Coefficient of a standardized attribute in original units.
    pub fn original_coefficient(&self, name: &str, coefficient: f64) -> f64 {
        match self.attributes.iter().find(|s| s.name == name) {
            Some(s) => coefficient / s.sd,
            None => coefficient,
        }
    }

    /// Maps a context value in original units to model units.
    pub fn context_to_model(&self, name: &str, value: f64) -> f64 {
        match self.context.iter().find(|s| s.name == name) {
            Some(s) => (value - s.mean) / s.sd,
            None => value,
        }
    }
}

fn moments(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let v: Vec<f64> = values.collect();
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Z-scores the named attribute columns (over available alternatives) and
/// continuous context columns (over occasions).
pub fn standardize(data: &ChoiceDataset, decl: &StandardizeDecl) -> Result<(ChoiceDataset, ScalingRecord)> {
    let mut out = data.clone();
    let mut record = ScalingRecord::default();
    for name in &decl.attributes {
        let col = data
            .column_names
            .iter()
            .position(|n| n == name)
            .ok_or_else(|| Error::invalid(format!("cannot standardize unknown column '{name}'")))?;
        let (mean, sd) = moments(data.occasions().flat_map(|o| {
            (0..o.n_alternatives())
                .filter(|r| o.availability[*r])
                .map(move |r| o.attributes[(r, col)])
        }));
        if !(sd > 1e-12) {
            record.skipped.push(name.clone());
            continue;
        }
        for occ in out.individuals.iter_mut().flat_map(|i| i.occasions.iter_mut()) {
            for r in 0..occ.attributes.nrows() {
                occ.attributes[(r, col)] = (occ.attributes[(r, col)] - mean) / sd;
            }
        }
        record.attributes.push(ColumnScaling { name: name.clone(), mean, sd });
    }
    for name in &decl.context {
        let c = data
            .context_names
            .iter()
            .position(|n| n == name)
            .ok_or_else(|| Error::invalid(format!("cannot standardize unknown context '{name}'")))?;
        if data.context_kinds[c] != ContextKind::Continuous {
            return Err(Error::invalid(format!("binary context '{name}' cannot be standardized")));
        }
        let (mean, sd) = moments(data.occasions().map(|o| o.context.0[c]));
        if !(sd > 1e-12) {
            record.skipped.push(name.clone());
            continue;
        }
        for occ in out.individuals.iter_mut().flat_map(|i| i.occasions.iter_mut()) {
            occ.context.0[c] = (occ.context.0[c] - mean) / sd;
        }
        record.context.push(ColumnScaling { name: name.clone(), mean, sd });
    }
    Ok((out, record))
}

/// Applies a previously computed scaling record, e.g. to held-out data.
pub fn apply_scaling(data: &ChoiceDataset, record: &ScalingRecord) -> Result<ChoiceDataset> {
    let mut out = data.clone();
    for s in &record.attributes {
        let col = data
            .column_names
            .iter()
            .position(|n| *n == s.name)
            .ok_or_else(|| Error::invalid(format!("scaled column '{}' is missing", s.name)))?;
        for occ in out.individuals.iter_mut().flat_map(|i| i.occasions.iter_mut()) {
            for r in 0..occ.attributes.nrows() {
                occ.attributes[(r, col)] = (occ.attributes[(r, col)] - s.mean) / s.sd;
            }
        }
    }
    for s in &record.context {
        let c = data
            .context_names
            .iter()
            .position(|n| *n == s.name)
            .ok_or_else(|| Error::invalid(format!("scaled context '{}' is missing", s.name)))?;
        for occ in out.individuals.iter_mut().flat_map(|i| i.occasions.iter_mut()) {
            occ.context.0[c] = (occ.context.0[c] - s.mean) / s.sd;
        }
    }
    Ok(out)
}

/// Standardizes a freshly read dataset, fitting the scaling here unless a
/// record is supplied.
pub fn prepare_dataset(
    raw: &ChoiceDataset,
    config: &ModelConfig,
    scaling: Option<&ScalingRecord>,
) -> Result<(ChoiceDataset, ScalingRecord)> {
    match scaling {
        Some(r) => Ok((apply_scaling(raw, r)?, r.clone())),
        None => standardize(raw, &config.standardize),
    }
}
