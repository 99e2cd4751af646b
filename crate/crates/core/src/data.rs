//! Synthetic multimodal tasks over a grid of coloured patches.
//!
//! An image is a `grid_h x grid_w` arrangement of square patches. Coloured
//! objects occupy single patches; an optional white "hot" patch anchors the
//! position questions. Every question comes with a deterministic rationale
//! whose tokens form a prefix of the target sequence, followed by the answer.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::config::{ModelConfig, TaskFamily};
use crate::error::{Error, Result};
use crate::numkernel::Tensor;
use crate::rng::{normal_vec, SeedRng};

pub mod vocab {
    pub const PAD: usize = 0;
    pub const EOS: usize = 1;
    pub const BOT: usize = 2;
    pub const EOT: usize = 3;
    pub const NEWLINE: usize = 4;
    pub const ANS: usize = 5;
    pub const ROWS: usize = 6;
    pub const SUM: usize = 7;
    pub const COL: usize = 8;
    pub const ROW: usize = 9;
    pub const CMP: usize = 10;
    pub const YES: usize = 11;
    pub const NO: usize = 12;
    pub const Q_COUNT: usize = 13;
    pub const Q_LEFT: usize = 14;
    pub const Q_ABOVE: usize = 15;
    pub const Q_DESCRIBE: usize = 16;
    pub const Q_REL: usize = 17;
    pub const RED: usize = 18;
    pub const GREEN: usize = 19;
    pub const BLUE: usize = 20;
    pub const DIGIT_0: usize = 24;
    pub const MAX_DIGIT: usize = 16;

    pub fn digit(n: usize) -> usize {
        assert!(n <= MAX_DIGIT, "digit {n} beyond vocabulary");
        DIGIT_0 + n
    }

    pub fn colour(c: usize) -> usize {
        RED + c
    }

    pub fn name(id: usize) -> String {
        match id {
            PAD => "<pad>".into(),
            EOS => "<eos>".into(),
            BOT => "<|bot|>".into(),
            EOT => "<|eot|>".into(),
            NEWLINE => "\\n".into(),
            ANS => "ANS".into(),
            ROWS => "ROWS".into(),
            SUM => "SUM".into(),
            COL => "COL".into(),
            ROW => "ROW".into(),
            CMP => "CMP".into(),
            YES => "YES".into(),
            NO => "NO".into(),
            Q_COUNT => "Q_COUNT".into(),
            Q_LEFT => "Q_LEFT".into(),
            Q_ABOVE => "Q_ABOVE".into(),
            Q_DESCRIBE => "Q_DESCRIBE".into(),
            Q_REL => "Q_REL".into(),
            RED => "RED".into(),
            GREEN => "GREEN".into(),
            BLUE => "BLUE".into(),
            d if (DIGIT_0..=DIGIT_0 + MAX_DIGIT).contains(&d) => format!("{}", d - DIGIT_0),
            other => format!("<{other}>"),
        }
    }
}

/// Smallest vocabulary holding every reserved id.
pub const MIN_VOCAB: usize = vocab::DIGIT_0 + vocab::MAX_DIGIT + 1;

const COLOURS: [[f64; 3]; 3] = [[1.0, 0.1, 0.1], [0.1, 1.0, 0.1], [0.1, 0.1, 1.0]];
const HOT: [f64; 3] = [1.0, 1.0, 1.0];
const NOISE: f64 = 0.05;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Object {
    pub row: usize,
    pub col: usize,
    pub colour: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Meta {
    pub image_id: usize,
    pub objects: Vec<Object>,
    pub hot: Option<(usize, usize)>,
    /// Objects counted by the question (all or one colour).
    pub count: usize,
    pub family: TaskFamily,
    pub grid_h: usize,
    pub grid_w: usize,
}

/// Target layout a stage trains on.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Template {
    Caption,
    Instruction,
    Rationale,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticExample {
    pub image_patches: Tensor,
    pub question_ids: Vec<usize>,
    pub rationale_ids: Vec<usize>,
    pub answer_ids: Vec<usize>,
    pub template: Template,
    /// The question the image was generated with, independent of template.
    pub base_question: Vec<usize>,
    pub meta: Meta,
}

impl SyntheticExample {
    /// `Y = rationale ++ answer`.
    pub fn target(&self) -> Vec<usize> {
        let mut y = self.rationale_ids.clone();
        y.extend_from_slice(&self.answer_ids);
        y
    }

    pub fn with_template(&self, template: Template, newline_every: usize) -> SyntheticExample {
        let (q, r, a) = render_text(&self.meta, &self.base_question, template, newline_every);
        SyntheticExample {
            question_ids: q,
            rationale_ids: r,
            answer_ids: a,
            template,
            ..self.clone()
        }
    }

    /// Reference answer tokens after `ANS`.
    pub fn answer_tail(&self) -> &[usize] {
        answer_tail(&self.answer_ids)
    }
}

/// Tokens after the first `ANS`, or the whole slice when there is none.
pub fn answer_tail(ids: &[usize]) -> &[usize] {
    match ids.iter().position(|&t| t == vocab::ANS) {
        Some(p) => &ids[p + 1..],
        None => ids,
    }
}

/// Exact match of the answer tokens, compared up to and including `EOS`.
pub fn answer_matches(generated: &[usize], ex: &SyntheticExample) -> bool {
    let want = ex.answer_tail();
    let got = answer_tail(generated);
    let cut = |s: &[usize]| -> Vec<usize> {
        match s.iter().position(|&t| t == vocab::EOS) {
            Some(p) => s[..=p].to_vec(),
            None => s.to_vec(),
        }
    };
    generated.contains(&vocab::ANS) == ex.answer_ids.contains(&vocab::ANS) && cut(got) == cut(want)
}

fn counts_per_row(objs: &[Object], grid_h: usize, colour: Option<usize>) -> Vec<usize> {
    let mut rows = vec![0; grid_h];
    for o in objs {
        if colour.is_none_or(|c| c == o.colour) {
            rows[o.row] += 1;
        }
    }
    rows
}

fn render_text(
    meta: &Meta,
    question: &[usize],
    template: Template,
    newline_every: usize,
) -> (Vec<usize>, Vec<usize>, Vec<usize>) {
    let grid_h = meta.grid_h;
    use vocab::*;
    let colour_counts: Vec<usize> = (0..3)
        .map(|c| meta.objects.iter().filter(|o| o.colour == c).count())
        .collect();
    if template == Template::Caption {
        let mut r = Vec::new();
        for (c, &n) in colour_counts.iter().enumerate() {
            r.push(colour(c));
            r.push(digit(n));
        }
        return (vec![Q_DESCRIBE], r, vec![EOS]);
    }
    let yes_no = |b: bool| if b { YES } else { NO };
    let (short, long, ans): (Vec<usize>, Vec<usize>, usize) = match question[0] {
        Q_COUNT => {
            let colour_q = question.get(1).map(|&t| t - RED);
            let rows = counts_per_row(&meta.objects, grid_h, colour_q);
            let mut long = vec![ROWS];
            for (i, &n) in rows.iter().enumerate() {
                long.push(digit(n));
                if newline_every > 0 && (i + 1) % newline_every == 0 && i + 1 < rows.len() {
                    long.push(NEWLINE);
                }
            }
            long.push(SUM);
            let short = match colour_q {
                Some(c) => vec![colour(c), digit(colour_counts[c])],
                None => {
                    let mut s = Vec::new();
                    for (c, &n) in colour_counts.iter().enumerate() {
                        s.push(colour(c));
                        s.push(digit(n));
                    }
                    s
                }
            };
            (short, long, digit(meta.count))
        }
        Q_LEFT | Q_ABOVE => {
            let (r, c) = meta.hot.expect("position question needs a hot patch");
            let left = question[0] == Q_LEFT;
            let coord = if left { c } else { r };
            let tag = if left { COL } else { ROW };
            let centre = if left { meta.grid_w } else { grid_h } / 2;
            (
                vec![tag, digit(coord)],
                vec![tag, digit(coord), CMP, digit(centre)],
                yes_no(coord < centre),
            )
        }
        Q_REL => {
            let a = first_of(meta, question[1] - RED);
            let b = first_of(meta, question[2] - RED);
            (
                vec![COL, digit(a.col), COL, digit(b.col)],
                vec![COL, digit(a.col), COL, digit(b.col), CMP],
                yes_no(a.col < b.col),
            )
        }
        other => panic!("unknown question token {other}"),
    };
    let r = if template == Template::Instruction { short } else { long };
    (question.to_vec(), r, vec![ANS, ans, EOS])
}

fn first_of(meta: &Meta, colour: usize) -> &Object {
    meta.objects
        .iter()
        .find(|o| o.colour == colour)
        .expect("relation question needs both colours")
}

pub struct Generator {
    pub grid_h: usize,
    pub grid_w: usize,
    pub patch_side: usize,
    pub max_objects: usize,
    pub newline_every: usize,
}

impl Generator {
    pub fn new(model: &ModelConfig, max_objects: usize, newline_every: usize) -> Result<Self> {
        let cells = model.n_v();
        if max_objects == 0 || max_objects + 1 > cells || max_objects > vocab::MAX_DIGIT {
            return Err(Error::Config(format!(
                "max_objects {max_objects} must lie in 1..={}",
                (cells - 1).min(vocab::MAX_DIGIT)
            )));
        }
        if model.grid_h.max(model.grid_w) > vocab::MAX_DIGIT {
            return Err(Error::Config("grid side exceeds the digit vocabulary".into()));
        }
        Ok(Generator {
            grid_h: model.grid_h,
            grid_w: model.grid_w,
            patch_side: model.patch_side,
            max_objects,
            newline_every,
        })
    }

    fn render(&self, rng: &SeedRng, objects: &[Object], hot: Option<(usize, usize)>) -> Tensor {
        let ps = self.patch_side;
        let d = ps * ps * 3;
        let n = self.grid_h * self.grid_w;
        let mut data = normal_vec(&mut rng.split_str("pixels").stream(), n * d, NOISE);
        let mut paint = |r: usize, c: usize, rgb: &[f64; 3]| {
            let base = (r * self.grid_w + c) * d;
            for px in 0..ps * ps {
                for ch in 0..3 {
                    data[base + px * 3 + ch] += rgb[ch];
                }
            }
        };
        for o in objects {
            paint(o.row, o.col, &COLOURS[o.colour]);
        }
        if let Some((r, c)) = hot {
            paint(r, c, &HOT);
        }
        Tensor::from_parts(vec![n, d], data)
    }

    fn scene(&self, rng: &SeedRng, want_hot: bool, need_colours: bool) -> (Vec<Object>, Option<(usize, usize)>) {
        let mut s = rng.split_str("scene").stream();
        let mut cells: Vec<usize> = (0..self.grid_h * self.grid_w).collect();
        cells.shuffle(&mut s);
        let lo = if need_colours { 3.min(self.max_objects) } else { 1 };
        let n = s.random_range(lo..=self.max_objects);
        let mut objects: Vec<Object> = cells[..n]
            .iter()
            .enumerate()
            .map(|(i, &cell)| Object {
                row: cell / self.grid_w,
                col: cell % self.grid_w,
                colour: if need_colours && i < 3 { i } else { s.random_range(0..3) },
            })
            .collect();
        objects.sort_by_key(|o| (o.row, o.col));
        let hot = want_hot.then(|| {
            let cell = cells[n];
            (cell / self.grid_w, cell % self.grid_w)
        });
        (objects, hot)
    }

    fn questions(&self, family: TaskFamily, rng: &SeedRng, objects: &[Object]) -> Vec<Vec<usize>> {
        use vocab::*;
        let mut s = rng.split_str("question").stream();
        let present: Vec<usize> = (0..3).filter(|&c| objects.iter().any(|o| o.colour == c)).collect();
        match family {
            TaskFamily::Counting => vec![vec![Q_COUNT]],
            TaskFamily::Position => vec![vec![if s.random_bool(0.5) { Q_LEFT } else { Q_ABOVE }]],
            TaskFamily::Relation => {
                let a = present[s.random_range(0..present.len())];
                let mut b = present[s.random_range(0..present.len())];
                if b == a {
                    b = present[(present.iter().position(|&x| x == a).unwrap() + 1) % present.len()];
                }
                vec![vec![Q_REL, colour(a), colour(b)]]
            }
            TaskFamily::Mixed => {
                let c = present[s.random_range(0..present.len())];
                let a = present[0];
                let b = present[present.len() - 1];
                let mut qs = vec![
                    vec![Q_COUNT],
                    vec![Q_COUNT, colour(c)],
                    vec![Q_LEFT],
                    vec![Q_ABOVE],
                ];
                if a != b {
                    qs.push(vec![Q_REL, colour(a), colour(b)]);
                }
                qs
            }
        }
    }

    /// `count` examples. For the mixed family each image contributes one
    /// example per question until `count` is reached.
    pub fn generate(&self, count: usize, family: TaskFamily, seed: u64, template: Template) -> Result<Vec<SyntheticExample>> {
        if count == 0 {
            return Err(Error::Config("dataset count must be >= 1".into()));
        }
        let root = SeedRng::new(seed).split_str("dataset");
        let mut out = Vec::with_capacity(count);
        let mut image_id = 0;
        while out.len() < count {
            let rng = root.split(image_id as u64);
            let want_hot = matches!(family, TaskFamily::Position | TaskFamily::Mixed);
            let need_colours = matches!(family, TaskFamily::Relation | TaskFamily::Mixed);
            let (objects, hot) = self.scene(&rng, want_hot, need_colours);
            let patches = self.render(&rng, &objects, hot);
            for q in self.questions(family, &rng, &objects) {
                if out.len() == count {
                    break;
                }
                let colour_q = (q[0] == vocab::Q_COUNT).then(|| q.get(1).map(|&t| t - vocab::RED)).flatten();
                let count_val = objects.iter().filter(|o| colour_q.is_none_or(|c| c == o.colour)).count();
                let meta = Meta {
                    image_id,
                    objects: objects.clone(),
                    hot,
                    count: count_val,
                    family,
                    grid_h: self.grid_h,
                    grid_w: self.grid_w,
                };
                let (qi, r, a) = render_text(&meta, &q, template, self.newline_every);
                out.push(SyntheticExample {
                    image_patches: patches.clone(),
                    question_ids: qi,
                    rationale_ids: r,
                    answer_ids: a,
                    template,
                    base_question: q,
                    meta,
                });
            }
            image_id += 1;
        }
        Ok(out)
    }

    pub fn retemplate(&self, examples: &[SyntheticExample], template: Template) -> Vec<SyntheticExample> {
        examples
            .iter()
            .map(|e| e.with_template(template, self.newline_every))
            .collect()
    }

    /// Pixel image `[H_px x W_px x 3]` reassembled from patches.
    pub fn pixels(&self, patches: &Tensor) -> Vec<f64> {
        let ps = self.patch_side;
        let (hp, wp) = (self.grid_h * ps, self.grid_w * ps);
        let d = ps * ps * 3;
        let mut img = vec![0.0; hp * wp * 3];
        for r in 0..self.grid_h {
            for c in 0..self.grid_w {
                let base = (r * self.grid_w + c) * d;
                for py in 0..ps {
                    for px in 0..ps {
                        for ch in 0..3 {
                            let y = r * ps + py;
                            let x = c * ps + px;
                            img[(y * wp + x) * 3 + ch] = patches.data()[base + (py * ps + px) * 3 + ch];
                        }
                    }
                }
            }
        }
        img
    }

    /// Reconstruction target `[C x hw x hw]`: adaptive average pooling of the
    /// pixel image followed by a fixed, seeded channel map.
    pub fn latent_target(&self, patches: &Tensor, channels: usize, hw: usize) -> Tensor {
        let img = self.pixels(patches);
        let (hp, wp) = (self.grid_h * self.patch_side, self.grid_w * self.patch_side);
        let map = normal_vec(&mut SeedRng::new(0x1A7E_u64).split_str("latent_map").stream(), channels * 3, 1.0);
        let mut out = vec![0.0; channels * hw * hw];
        for i in 0..hw {
            let (y0, y1) = (i * hp / hw, ((i + 1) * hp).div_ceil(hw));
            for j in 0..hw {
                let (x0, x1) = (j * wp / hw, ((j + 1) * wp).div_ceil(hw));
                let mut mean = [0.0; 3];
                for y in y0..y1 {
                    for x in x0..x1 {
                        for ch in 0..3 {
                            mean[ch] += img[(y * wp + x) * 3 + ch];
                        }
                    }
                }
                let area = ((y1 - y0) * (x1 - x0)) as f64;
                for c in 0..channels {
                    let v: f64 = (0..3).map(|ch| map[c * 3 + ch] * mean[ch] / area).sum();
                    out[(c * hw + i) * hw + j] = 2.0 * v;
                }
            }
        }
        Tensor::from_parts(vec![channels, hw, hw], out)
    }
}

/// Writes examples as pretty JSON. Output depends only on the examples.
pub fn save_archive(path: &Path, examples: &[SyntheticExample]) -> Result<()> {
    let s = serde_json::to_string(examples).map_err(|e| Error::Format(e.to_string()))?;
    std::fs::write(path, s).map_err(|e| Error::file(path, e))
}

pub fn load_archive(path: &Path) -> Result<Vec<SyntheticExample>> {
    let s = std::fs::read_to_string(path).map_err(|e| Error::file(path, e))?;
    serde_json::from_str(&s).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gen() -> Generator {
        Generator::new(&ModelConfig::default(), 8, 0).unwrap()
    }

    #[test]
    fn counting_answers_match_meta() {
        let ex = gen().generate(64, TaskFamily::Counting, 5, Template::Rationale).unwrap();
        for e in &ex {
            assert_eq!(e.answer_ids, vec![vocab::ANS, vocab::digit(e.meta.count), vocab::EOS]);
            assert_eq!(e.meta.count, e.meta.objects.len());
            let rows: usize = e.rationale_ids[1..e.rationale_ids.len() - 1]
                .iter()
                .map(|&t| t - vocab::DIGIT_0)
                .sum();
            assert_eq!(rows, e.meta.count);
            assert!(e.target().starts_with(&e.rationale_ids));
        }
    }

    #[test]
    fn deterministic() {
        let g = gen();
        let a = g.generate(10, TaskFamily::Mixed, 1, Template::Rationale).unwrap();
        let b = g.generate(10, TaskFamily::Mixed, 1, Template::Rationale).unwrap();
        assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
        assert_ne!(a, g.generate(10, TaskFamily::Mixed, 2, Template::Rationale).unwrap());
    }

    #[test]
    fn mixed_images_carry_several_questions() {
        let ex = gen().generate(20, TaskFamily::Mixed, 3, Template::Rationale).unwrap();
        let first = ex[0].meta.image_id;
        let same: Vec<_> = ex.iter().filter(|e| e.meta.image_id == first).collect();
        assert!(same.len() >= 4);
        assert!(same.windows(2).all(|w| w[0].question_ids != w[1].question_ids));
    }

    #[test]
    fn position_answers() {
        let ex = gen().generate(30, TaskFamily::Position, 4, Template::Rationale).unwrap();
        for e in ex {
            let (r, c) = e.meta.hot.unwrap();
            let coord = if e.question_ids[0] == vocab::Q_LEFT { c } else { r };
            let want = if coord < 4 { vocab::YES } else { vocab::NO };
            assert_eq!(e.answer_ids[1], want);
        }
    }

    #[test]
    fn templates_and_newlines() {
        let g = Generator::new(&ModelConfig::default(), 8, 4).unwrap();
        let ex = g.generate(4, TaskFamily::Counting, 0, Template::Rationale).unwrap();
        assert_eq!(ex[0].rationale_ids.iter().filter(|&&t| t == vocab::NEWLINE).count(), 1);
        let cap = g.retemplate(&ex, Template::Caption);
        assert_eq!(cap[0].question_ids, vec![vocab::Q_DESCRIBE]);
        assert_eq!(cap[0].answer_ids, vec![vocab::EOS]);
        let ins = g.retemplate(&ex, Template::Instruction);
        assert_eq!(ins[0].rationale_ids.len(), 6);
        assert_eq!(ins[0].answer_ids, ex[0].answer_ids);
    }

    #[test]
    fn latent_target_shape() {
        let g = gen();
        let ex = g.generate(1, TaskFamily::Counting, 0, Template::Rationale).unwrap();
        let t = g.latent_target(&ex[0].image_patches, 2, 7);
        assert_eq!(t.shape(), &[2, 7, 7]);
        assert!(t.is_finite());
    }

    #[test]
    fn match_metric() {
        let g = gen();
        let ex = &g.generate(1, TaskFamily::Counting, 0, Template::Rationale).unwrap()[0];
        let mut out = ex.target();
        assert!(answer_matches(&out, ex));
        out.push(vocab::SUM);
        assert!(answer_matches(&out, ex));
        let n = out.len();
        out[n - 3] = vocab::digit(15);
        assert!(!answer_matches(&out, ex));
        assert!(!answer_matches(&[vocab::EOS], ex));
    }
}
