//! A CIF 1.1 subset reader: data blocks, tag/value pairs, loops, quoted
//! strings and semicolon text fields. No dictionary validation.

use std::collections::HashMap;

use super::symop::{parse_symop, SymOp};
use super::CifError;
use crate::crystal::{adp_cif_to_cartesian, AtomSite, CrystalStructure, LatticeCell, Mat3, Vec3};
use crate::elements;

const CELL_TAGS: [&str; 6] = [
    "_cell_length_a",
    "_cell_length_b",
    "_cell_length_c",
    "_cell_angle_alpha",
    "_cell_angle_beta",
    "_cell_angle_gamma",
];

const SYMOP_TAGS: [&str; 3] = [
    "_symmetry_equiv_pos_as_xyz",
    "_space_group_symop_operation_xyz",
    "_space_group_symop.operation_xyz",
];

const TEMPERATURE_TAGS: [&str; 2] = [
    "_diffrn_ambient_temperature",
    "_cell_measurement_temperature",
];

const R_FACTOR_TAGS: [&str; 2] = ["_refine_ls_r_factor_gt", "_refine_ls_r_factor_all"];

/// Tags whose presence marks a structure as carrying free-text remarks.
const REMARK_TAGS: [&str; 2] = ["_ccdc_remarks", "_database_remarks"];

/// Fractional tolerance for merging symmetry-equivalent sites.
const MERGE_TOLERANCE: f64 = 1e-3;

#[derive(Debug, Clone, PartialEq)]
enum TokenKind {
    DataBlock(String),
    Loop,
    Tag(String),
    Value(Option<String>),
}

#[derive(Debug, Clone)]
struct Token {
    kind: TokenKind,
    line: usize,
    column: usize,
}

fn tokenize(text: &str) -> Result<Vec<Token>, CifError> {
    let mut tokens = Vec::new();
    let lines: Vec<&str> = text.lines().collect();
    let mut li = 0;
    while li < lines.len() {
        let line = lines[li];
        // semicolon text field
        if let Some(rest) = line.strip_prefix(';') {
            let (start_line, mut body) = (li + 1, vec![rest.to_string()]);
            li += 1;
            loop {
                if li >= lines.len() {
                    return Err(CifError::Parse {
                        line: start_line,
                        column: 1,
                        message: "unterminated text field".into(),
                    });
                }
                if lines[li].starts_with(';') {
                    break;
                }
                body.push(lines[li].to_string());
                li += 1;
            }
            tokens.push(Token {
                kind: TokenKind::Value(Some(body.join("\n").trim().to_string())),
                line: start_line,
                column: 1,
            });
            // anything after the closing ';' on the same line is tokenized below
            tokenize_line(&lines[li][1..], li + 1, 2, &mut tokens)?;
            li += 1;
            continue;
        }
        tokenize_line(line, li + 1, 1, &mut tokens)?;
        li += 1;
    }
    Ok(tokens)
}

fn tokenize_line(
    line: &str,
    lineno: usize,
    col0: usize,
    out: &mut Vec<Token>,
) -> Result<(), CifError> {
    let chars: Vec<char> = line.chars().collect();
    let mut i = 0;
    while i < chars.len() {
        let c = chars[i];
        if c.is_whitespace() {
            i += 1;
            continue;
        }
        if c == '#' {
            break;
        }
        let column = i + col0;
        if c == '\'' || c == '"' {
            // a quote closes only when followed by whitespace or end of line
            let mut j = i + 1;
            loop {
                if j >= chars.len() {
                    return Err(CifError::Parse {
                        line: lineno,
                        column,
                        message: "unterminated quoted string".into(),
                    });
                }
                if chars[j] == c && (j + 1 == chars.len() || chars[j + 1].is_whitespace()) {
                    break;
                }
                j += 1;
            }
            let s: String = chars[i + 1..j].iter().collect();
            out.push(Token {
                kind: TokenKind::Value(Some(s)),
                line: lineno,
                column,
            });
            i = j + 1;
            continue;
        }
        let mut j = i;
        while j < chars.len() && !chars[j].is_whitespace() {
            j += 1;
        }
        let word: String = chars[i..j].iter().collect();
        let lower = word.to_ascii_lowercase();
        let kind = if lower.starts_with("data_") {
            TokenKind::DataBlock(word[5..].to_string())
        } else if lower == "loop_" {
            TokenKind::Loop
        } else if word.starts_with('_') {
            TokenKind::Tag(lower)
        } else if word == "?" || word == "." {
            TokenKind::Value(None)
        } else {
            TokenKind::Value(Some(word))
        };
        out.push(Token {
            kind,
            line: lineno,
            column,
        });
        i = j;
    }
    Ok(())
}

#[derive(Debug, Default)]
struct CifLoop {
    tags: Vec<String>,
    rows: Vec<Vec<Option<String>>>,
}

impl CifLoop {
    fn column(&self, tag: &str) -> Option<usize> {
        self.tags.iter().position(|t| t == tag)
    }
}

#[derive(Debug, Default)]
struct DataBlock {
    name: String,
    items: HashMap<String, Option<String>>,
    loops: Vec<CifLoop>,
}

impl DataBlock {
    fn find_loop(&self, tag: &str) -> Option<&CifLoop> {
        self.loops.iter().find(|l| l.column(tag).is_some())
    }

    fn has_tag(&self, tag: &str) -> bool {
        self.items.contains_key(tag) || self.find_loop(tag).is_some()
    }

    fn value(&self, tag: &str) -> Option<&str> {
        self.items.get(tag).and_then(|v| v.as_deref())
    }
}

fn parse_blocks(text: &str) -> Result<Vec<DataBlock>, CifError> {
    let tokens = tokenize(text)?;
    let mut blocks: Vec<DataBlock> = Vec::new();
    let mut i = 0;
    let orphan = |t: &Token, what: &str| CifError::Parse {
        line: t.line,
        column: t.column,
        message: format!("{what} outside of a data block"),
    };
    while i < tokens.len() {
        let tok = &tokens[i];
        match &tok.kind {
            TokenKind::DataBlock(name) => {
                blocks.push(DataBlock {
                    name: name.clone(),
                    ..Default::default()
                });
                i += 1;
            }
            TokenKind::Tag(tag) => {
                let block = blocks.last_mut().ok_or_else(|| orphan(tok, "tag"))?;
                match tokens.get(i + 1).map(|t| &t.kind) {
                    Some(TokenKind::Value(v)) => {
                        block.items.insert(tag.clone(), v.clone());
                        i += 2;
                    }
                    _ => {
                        return Err(CifError::Parse {
                            line: tok.line,
                            column: tok.column,
                            message: format!("tag {tag} has no value"),
                        })
                    }
                }
            }
            TokenKind::Loop => {
                let block = blocks.last_mut().ok_or_else(|| orphan(tok, "loop_"))?;
                let (loop_line, loop_col) = (tok.line, tok.column);
                i += 1;
                let mut lp = CifLoop::default();
                while let Some(TokenKind::Tag(t)) = tokens.get(i).map(|t| &t.kind) {
                    lp.tags.push(t.clone());
                    i += 1;
                }
                if lp.tags.is_empty() {
                    return Err(CifError::Parse {
                        line: loop_line,
                        column: loop_col,
                        message: "loop_ without tags".into(),
                    });
                }
                let mut values = Vec::new();
                let mut last_line = loop_line;
                while let Some(Token {
                    kind: TokenKind::Value(v),
                    line,
                    ..
                }) = tokens.get(i)
                {
                    values.push(v.clone());
                    last_line = *line;
                    i += 1;
                }
                let width = lp.tags.len();
                if values.len() % width != 0 {
                    return Err(CifError::Parse {
                        line: last_line,
                        column: loop_col,
                        message: format!(
                            "truncated row in loop starting with {} at line {loop_line}: {} values for {} columns",
                            lp.tags[0],
                            values.len(),
                            width
                        ),
                    });
                }
                lp.rows = values.chunks(width).map(|c| c.to_vec()).collect();
                block.loops.push(lp);
            }
            TokenKind::Value(_) => {
                return Err(CifError::Parse {
                    line: tok.line,
                    column: tok.column,
                    message: "value without a tag".into(),
                })
            }
        }
    }
    Ok(blocks)
}

/// Parses a CIF number, dropping a trailing standard uncertainty `(12)`.
fn parse_number(s: &str) -> Option<f64> {
    let core = match s.find('(') {
        Some(p) => &s[..p],
        None => s,
    };
    core.trim().parse::<f64>().ok().filter(|v| v.is_finite())
}

/// One data block: the asymmetric unit plus its symmetry operations.
#[derive(Debug, Clone)]
pub struct ParsedBlock {
    pub structure: CrystalStructure,
    pub symops: Vec<SymOp>,
}

impl ParsedBlock {
    pub fn expand(&self) -> CrystalStructure {
        expand_symmetry(&self.structure, &self.symops)
    }
}

/// Parses every data block in a CIF document. The returned structures hold
/// the asymmetric unit with Cartesian ADPs; see [`expand_symmetry`].
pub fn parse_cif(text: &str) -> Result<Vec<ParsedBlock>, CifError> {
    parse_blocks(text)?.iter().map(block_to_structure).collect()
}

/// Parses and symmetry-expands every data block.
pub fn load_cif(text: &str) -> Result<Vec<CrystalStructure>, CifError> {
    Ok(parse_cif(text)?.iter().map(ParsedBlock::expand).collect())
}

fn block_to_structure(block: &DataBlock) -> Result<ParsedBlock, CifError> {
    let mut cell_params = [0.0; 6];
    for (k, tag) in CELL_TAGS.iter().enumerate() {
        cell_params[k] =
            block
                .value(tag)
                .and_then(parse_number)
                .ok_or_else(|| CifError::MissingCell {
                    block: block.name.clone(),
                    tag: tag.to_string(),
                })?;
    }
    let [a, b, c, al, be, ga] = cell_params;
    let cell = LatticeCell::new(a, b, c, al, be, ga)?;

    let site_loop = block
        .find_loop("_atom_site_fract_x")
        .ok_or_else(|| CifError::NoAtoms {
            block: block.name.clone(),
        })?;
    let col = |t: &str| site_loop.column(t);
    let (cx, cy, cz) = match (
        col("_atom_site_fract_x"),
        col("_atom_site_fract_y"),
        col("_atom_site_fract_z"),
    ) {
        (Some(x), Some(y), Some(z)) => (x, y, z),
        _ => {
            return Err(CifError::NoAtoms {
                block: block.name.clone(),
            })
        }
    };
    let c_label = col("_atom_site_label");
    let c_type = col("_atom_site_type_symbol");
    let c_occ = col("_atom_site_occupancy");

    let anisotropic = collect_aniso(block)?;

    let mut sites = Vec::with_capacity(site_loop.rows.len());
    for (row_idx, row) in site_loop.rows.iter().enumerate() {
        let label = c_label
            .and_then(|c| row[c].clone())
            .unwrap_or_else(|| format!("#{}", row_idx + 1));
        let symbol = c_type
            .and_then(|c| row[c].clone())
            .unwrap_or_else(|| label.clone());
        let z = elements::atomic_number_from_label(&symbol)
            .or_else(|| elements::atomic_number_from_label(&label))
            .ok_or_else(|| CifError::UnknownElement(label.clone()))?;
        let coord = |c: usize| -> Result<f64, CifError> {
            row[c]
                .as_deref()
                .and_then(parse_number)
                .ok_or_else(|| CifError::Parse {
                    line: 0,
                    column: 0,
                    message: format!("atom {label}: missing fractional coordinate"),
                })
        };
        let frac = Vec3::new(coord(cx)?, coord(cy)?, coord(cz)?);
        let occupancy = c_occ
            .and_then(|c| row[c].as_deref())
            .and_then(parse_number)
            .unwrap_or(1.0);
        let mut site = AtomSite::new(&cell, z, frac).with_occupancy(occupancy);
        if let Some(u_cif) = anisotropic.get(&label) {
            site.adp = Some(adp_cif_to_cartesian(&cell, u_cif)?);
        }
        sites.push(site);
    }

    let mut symops = Vec::new();
    for tag in SYMOP_TAGS {
        if let Some(lp) = block.find_loop(tag) {
            let c = lp.column(tag).unwrap();
            for row in &lp.rows {
                if let Some(s) = &row[c] {
                    symops.push(parse_symop(s)?);
                }
            }
            break;
        }
        if let Some(s) = block.value(tag) {
            symops.push(parse_symop(s)?);
            break;
        }
    }
    if symops.is_empty() {
        symops.push(SymOp::identity());
    }

    let temperature = TEMPERATURE_TAGS
        .iter()
        .find_map(|t| block.value(t).and_then(parse_number));
    let r_factor = R_FACTOR_TAGS
        .iter()
        .find_map(|t| block.value(t).and_then(parse_number));
    let has_remarks = REMARK_TAGS.iter().any(|t| block.has_tag(t));

    let structure = CrystalStructure {
        id: block.name.clone(),
        cell,
        sites,
        temperature,
        r_factor,
        has_remarks,
        target: None,
    };
    Ok(ParsedBlock { structure, symops })
}

/// Anisotropic tensors keyed by atom label, in the CIF `Uij` convention
/// (`Bij` values are converted with `U = B / 8π²`).
fn collect_aniso(block: &DataBlock) -> Result<HashMap<String, Mat3>, CifError> {
    let mut out = HashMap::new();
    let Some(lp) = block.find_loop("_atom_site_aniso_label") else {
        return Ok(out);
    };
    let label_col = lp.column("_atom_site_aniso_label").unwrap();
    let (prefix, scale) = if lp.column("_atom_site_aniso_u_11").is_some() {
        ("_atom_site_aniso_u_", 1.0)
    } else if lp.column("_atom_site_aniso_b_11").is_some() {
        (
            "_atom_site_aniso_b_",
            1.0 / (8.0 * std::f64::consts::PI.powi(2)),
        )
    } else {
        return Ok(out);
    };
    let idx = ["11", "22", "33", "12", "13", "23"];
    let cols: Vec<Option<usize>> = idx
        .iter()
        .map(|s| lp.column(&format!("{prefix}{s}")))
        .collect();
    for row in &lp.rows {
        let Some(label) = row[label_col].clone() else {
            continue;
        };
        let mut u = [0.0; 6];
        let mut complete = true;
        for (k, c) in cols.iter().enumerate() {
            match c.and_then(|c| row[c].as_deref()).and_then(parse_number) {
                Some(v) => u[k] = v * scale,
                None => complete = false,
            }
        }
        if complete {
            let m = Mat3::new(u[0], u[3], u[4], u[3], u[1], u[5], u[4], u[5], u[2]);
            out.insert(label, m);
        }
    }
    Ok(out)
}

fn wrap_unit(v: f64) -> f64 {
    let w = v.rem_euclid(1.0);
    // rem_euclid can round up to exactly 1.0 for tiny negative inputs
    if w >= 1.0 {
        0.0
    } else {
        w
    }
}

fn same_position(a: &Vec3, b: &Vec3) -> bool {
    (0..3).all(|k| {
        let d = a[k] - b[k];
        (d - d.round()).abs() < MERGE_TOLERANCE
    })
}

/// Cartesian point operation `S = Mᵀ·W·M⁻ᵀ` for a fractional rotation `W`.
fn cartesian_operation(cell: &LatticeCell, w: &Mat3) -> Mat3 {
    if *w == Mat3::identity() {
        return Mat3::identity();
    }
    let inv_t = match cell.matrix.try_inverse() {
        Some(inv) => inv.transpose(),
        None => return *w,
    };
    let mut s = cell.matrix.transpose() * w * inv_t;
    for v in s.iter_mut() {
        if (*v - v.round()).abs() < 1e-12 {
            *v = v.round();
        }
    }
    s
}

/// Applies every operation to every site, wraps positions into `[0, 1)` and
/// merges coincident sites of the same element (first occurrence wins).
/// ADPs transform as `U' = S·U·Sᵀ`.
pub fn expand_symmetry(structure: &CrystalStructure, symops: &[SymOp]) -> CrystalStructure {
    let cell = &structure.cell;
    let identity = [SymOp::identity()];
    let ops = if symops.is_empty() {
        &identity[..]
    } else {
        symops
    };
    let cart_ops: Vec<Mat3> = ops
        .iter()
        .map(|op| cartesian_operation(cell, &op.rotation))
        .collect();

    let mut sites: Vec<crate::crystal::AtomSite> = Vec::new();
    for site in &structure.sites {
        for (op, s) in ops.iter().zip(&cart_ops) {
            let moved = op.apply(&site.frac_pos);
            let frac = Vec3::new(
                wrap_unit(moved[0]),
                wrap_unit(moved[1]),
                wrap_unit(moved[2]),
            );
            let duplicate = sites.iter().any(|e| {
                e.atomic_number == site.atomic_number && same_position(&e.frac_pos, &frac)
            });
            if duplicate {
                continue;
            }
            let mut new_site =
                AtomSite::new(cell, site.atomic_number, frac).with_occupancy(site.occupancy);
            new_site.adp = site.adp.map(|u| {
                let t = s * u.0 * s.transpose();
                crate::crystal::AdpTensor((t + t.transpose()) * 0.5)
            });
            sites.push(new_site);
        }
    }
    CrystalStructure {
        sites,
        ..structure.clone()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::crystal::AdpTensor;

    const MINIMAL: &str = "\
data_minimal
_cell_length_a 10
_cell_length_b 10
_cell_length_c 10
_cell_angle_alpha 90
_cell_angle_beta 90
_cell_angle_gamma 90
loop_
_atom_site_label
_atom_site_fract_x
_atom_site_fract_y
_atom_site_fract_z
C1 0 0 0
";

    #[test]
    fn minimal_block() {
        let blocks = parse_cif(MINIMAL).unwrap();
        assert_eq!(blocks.len(), 1);
        let s = &blocks[0].structure;
        assert_eq!(s.id, "minimal");
        assert_eq!(s.sites.len(), 1);
        assert_eq!(s.sites[0].atomic_number, 6);
        assert!(s.sites[0].adp.is_none());
        assert_eq!(s.sites[0].occupancy, 1.0);
        assert_eq!(s.temperature, None);
        assert_eq!(blocks[0].symops, vec![SymOp::identity()]);
    }

    #[test]
    fn aniso_loop_is_converted() {
        let text = format!(
            "{MINIMAL}\
loop_
_atom_site_aniso_label
_atom_site_aniso_U_11
_atom_site_aniso_U_22
_atom_site_aniso_U_33
_atom_site_aniso_U_23
_atom_site_aniso_U_13
_atom_site_aniso_U_12
C1 0.0201(3) 0.0302(4) 0.0250(2) 0.0040(1) -0.0020 0.0010
_diffrn_ambient_temperature 150(2)
_refine_ls_R_factor_gt 0.0345
"
        );
        let blocks = parse_cif(&text).unwrap();
        let s = &blocks[0].structure;
        let adp = s.sites[0].adp.expect("adp present");
        let expected = AdpTensor::from_unique([0.0201, 0.0302, 0.0250, 0.0010, -0.0020, 0.0040]);
        assert!((adp.0 - expected.0).abs().max() < 1e-15);
        assert_eq!(s.temperature, Some(150.0));
        assert_eq!(s.r_factor, Some(0.0345));
    }

    #[test]
    fn truncated_loop_names_the_loop() {
        let text = MINIMAL.replace("C1 0 0 0", "C1 0 0 0\nO1 0.5 0.5");
        match parse_cif(&text) {
            Err(CifError::Parse { message, .. }) => {
                assert!(message.contains("_atom_site_label"), "{message}")
            }
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn missing_cell_tag() {
        let text = MINIMAL.replace("_cell_angle_beta 90\n", "");
        assert!(matches!(
            parse_cif(&text),
            Err(CifError::MissingCell { tag, .. }) if tag == "_cell_angle_beta"
        ));
        let text = MINIMAL.replace("_cell_length_b 10", "_cell_length_b ?");
        assert!(matches!(
            parse_cif(&text),
            Err(CifError::MissingCell { .. })
        ));
    }

    #[test]
    fn quoted_strings_text_fields_and_comments() {
        let text = "\
# leading comment
data_q
_chemical_name_common 'it''s fine'
_publ_section_title
;
 A multi-line
 title
;
_cell_length_a 5 # trailing comment
_cell_length_b 5
_cell_length_c 5
_cell_angle_alpha 90
_cell_angle_beta 90
_cell_angle_gamma 90
loop_
_symmetry_equiv_pos_as_xyz
'x, y, z'
'-x, -y, -z'
loop_
_atom_site_label
_atom_site_type_symbol
_atom_site_fract_x
_atom_site_fract_y
_atom_site_fract_z
_atom_site_occupancy
Cl1 Cl 0.1 0.2 0.3 1.0
H1 H 0.4 . 0.1 ?
";
        let err = parse_cif(text).unwrap_err();
        // `.` as a coordinate is absent
        assert!(err.to_string().contains("H1"), "{err}");
        let fixed = text.replace("H1 H 0.4 . 0.1 ?", "H1 H 0.4 0.0 0.1 ?");
        let blocks = parse_cif(&fixed).unwrap();
        assert_eq!(blocks[0].symops.len(), 2);
        let s = &blocks[0].structure;
        assert_eq!(s.sites[0].atomic_number, 17);
        assert_eq!(s.sites[1].occupancy, 1.0);
    }

    #[test]
    fn multiple_blocks() {
        let text = format!(
            "{MINIMAL}\n{}",
            MINIMAL.replace("data_minimal", "data_second")
        );
        let blocks = parse_cif(&text).unwrap();
        assert_eq!(blocks.len(), 2);
        assert_eq!(blocks[1].structure.id, "second");
    }

    fn one_atom(frac: Vec3, adp: Option<AdpTensor>) -> CrystalStructure {
        let cell = LatticeCell::new(7.0, 8.0, 9.0, 90.0, 101.0, 90.0).unwrap();
        let mut site = AtomSite::new(&cell, 6, frac);
        site.adp = adp;
        CrystalStructure::new("s", cell, vec![site]).with_temperature(100.0)
    }

    #[test]
    fn identity_expansion_is_noop_and_idempotent() {
        let adp = AdpTensor::from_unique([0.02, 0.03, 0.025, 0.001, -0.002, 0.004]);
        let s = one_atom(Vec3::new(0.1, 0.2, 0.3), Some(adp));
        let once = expand_symmetry(&s, &[SymOp::identity()]);
        assert_eq!(once, s);
        let inv = parse_symop("-x,-y,-z").unwrap();
        let full = expand_symmetry(&s, &[SymOp::identity(), inv]);
        assert_eq!(expand_symmetry(&full, &[SymOp::identity()]), full);
    }

    #[test]
    fn inversion_creates_partner_with_same_adp() {
        let adp = AdpTensor::from_unique([0.02, 0.03, 0.025, 0.001, -0.002, 0.004]);
        let s = one_atom(Vec3::new(0.1, 0.1, 0.1), Some(adp));
        let ops = [SymOp::identity(), parse_symop("-x,-y,-z").unwrap()];
        let full = expand_symmetry(&s, &ops);
        assert_eq!(full.sites.len(), 2);
        assert!((full.sites[1].frac_pos - Vec3::new(0.9, 0.9, 0.9)).norm() < 1e-12);
        let (u0, u1) = (full.sites[0].adp.unwrap(), full.sites[1].adp.unwrap());
        assert!((u0.0 - u1.0).abs().max() < 1e-15);
    }

    #[test]
    fn special_position_merges() {
        let s = one_atom(Vec3::zeros(), None);
        let ops = [SymOp::identity(), parse_symop("-x,-y,-z").unwrap()];
        assert_eq!(expand_symmetry(&s, &ops).sites.len(), 1);
    }

    #[test]
    fn monoclinic_two_fold_rotates_adp() {
        // 2-fold along b in a monoclinic cell: S must be a proper rotation
        let adp = AdpTensor::from_unique([0.02, 0.03, 0.025, 0.001, -0.002, 0.004]);
        let s = one_atom(Vec3::new(0.1, 0.2, 0.3), Some(adp));
        let op = parse_symop("-x,y+1/2,-z+1/2").unwrap();
        let full = expand_symmetry(&s, &[SymOp::identity(), op]);
        assert_eq!(full.sites.len(), 2);
        let sm = cartesian_operation(&s.cell, &op.rotation);
        assert!((sm * sm.transpose() - Mat3::identity()).abs().max() < 1e-12);
        let (e0, _) = full.sites[0].adp.unwrap().eigendecompose();
        let (e1, _) = full.sites[1].adp.unwrap().eigendecompose();
        assert!((e0 - e1).norm() < 1e-12);
        assert!(full.sites[1].adp.unwrap().is_symmetric());
    }
}
