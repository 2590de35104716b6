//! Plain-text layout maps.
//!
//! A layout file has a short header of `key: value` lines, then a `grid:` line
//! followed by one text row per `y`, top to bottom. Lines starting with `;`
//! are comments.
//!
//! | char      | meaning                                               |
//! |-----------|-------------------------------------------------------|
//! | `#`       | wall                                                  |
//! | `.`       | floor                                                 |
//! | `1`..`9`  | switch k (a floor cell)                               |
//! | `A`..`I`  | door k (`A` is door 1)                                |
//! | `s`       | start cell, assigned to agents in row-major order     |
//! | `T`       | target-room floor                                     |
//!
//! The target room is the set of cells reachable from any `T` cell without
//! crossing walls or doors, so switches placed inside it belong to it.

use std::collections::VecDeque;
use std::fmt::Write as _;
use std::path::Path;

use super::TaskName;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Cell {
    Wall,
    Floor,
    /// 0-based switch index.
    Switch(usize),
    /// 0-based door index.
    Door(usize),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layout {
    pub task: TaskName,
    pub size: usize,
    pub max_steps: usize,
    cells: Vec<Cell>,
    target: Vec<bool>,
    pub starts: Vec<(usize, usize)>,
    pub switches: Vec<(usize, usize)>,
    pub doors: Vec<(usize, usize)>,
}

pub const DEFAULT_MAX_STEPS: usize = 300;

impl Layout {
    pub fn cell(&self, x: usize, y: usize) -> Cell {
        self.cells[y * self.size + x]
    }

    pub fn is_target(&self, x: usize, y: usize) -> bool {
        self.target[y * self.size + x]
    }

    pub fn num_doors(&self) -> usize {
        self.doors.len()
    }

    pub fn num_agents(&self) -> usize {
        self.starts.len()
    }

    /// Whether `(x, y)` belongs to the same room as `from` when every door is
    /// treated as closed.
    pub fn same_room(&self, from: (usize, usize), to: (usize, usize)) -> bool {
        self.flood(&[from])[to.1 * self.size + to.0]
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut task = None;
        let mut max_steps = DEFAULT_MAX_STEPS;
        let mut rows: Vec<&str> = Vec::new();
        let mut in_grid = false;
        for raw in text.lines() {
            let line = raw.trim_end();
            if line.starts_with(';') {
                continue;
            }
            if in_grid {
                if !line.is_empty() {
                    rows.push(line);
                }
                continue;
            }
            if line.trim().is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once(':')
                .ok_or_else(|| Error::Layout(format!("expected `key: value`, got {line:?}")))?;
            let value = value.trim();
            match key.trim() {
                "task" => task = Some(value.parse::<TaskName>()?),
                "max_steps" => {
                    max_steps = value
                        .parse()
                        .map_err(|_| Error::Layout(format!("bad max_steps {value:?}")))?
                }
                "grid" => in_grid = true,
                other => return Err(Error::Layout(format!("unknown header key {other:?}"))),
            }
        }
        let task = task.ok_or_else(|| Error::Layout("missing `task:` header".into()))?;
        let size = rows.len();
        if size == 0 {
            return Err(Error::Layout("empty grid".into()));
        }
        let mut cells = Vec::with_capacity(size * size);
        let mut starts = Vec::new();
        let mut switch_cells: Vec<Option<(usize, usize)>> = vec![None; 9];
        let mut door_cells: Vec<Option<(usize, usize)>> = vec![None; 9];
        let mut seeds = Vec::new();
        for (y, row) in rows.iter().enumerate() {
            let chars: Vec<char> = row.chars().collect();
            if chars.len() != size {
                return Err(Error::Layout(format!(
                    "row {y} has {} cells, grid must be {size}x{size}",
                    chars.len()
                )));
            }
            for (x, c) in chars.into_iter().enumerate() {
                let cell = match c {
                    '#' => Cell::Wall,
                    '.' => Cell::Floor,
                    's' => {
                        starts.push((x, y));
                        Cell::Floor
                    }
                    'T' => {
                        seeds.push((x, y));
                        Cell::Floor
                    }
                    '1'..='9' => {
                        let k = c as usize - '1' as usize;
                        if switch_cells[k].replace((x, y)).is_some() {
                            return Err(Error::Layout(format!("switch {} appears twice", k + 1)));
                        }
                        Cell::Switch(k)
                    }
                    'A'..='I' => {
                        let k = c as usize - 'A' as usize;
                        if door_cells[k].replace((x, y)).is_some() {
                            return Err(Error::Layout(format!("door {} appears twice", k + 1)));
                        }
                        Cell::Door(k)
                    }
                    other => {
                        return Err(Error::Layout(format!(
                            "unknown character {other:?} at ({x}, {y})"
                        )))
                    }
                };
                cells.push(cell);
            }
        }
        let switches = dense(switch_cells, "switch")?;
        let doors = dense(door_cells, "door")?;
        let mut layout = Layout {
            task,
            size,
            max_steps,
            cells,
            target: vec![false; size * size],
            starts,
            switches,
            doors,
        };
        if seeds.is_empty() {
            return Err(Error::Layout("no target cell (`T`)".into()));
        }
        layout.target = layout.flood(&seeds);
        layout.validate()?;
        Ok(layout)
    }

    fn passable_static(&self, x: usize, y: usize) -> bool {
        matches!(self.cell(x, y), Cell::Floor | Cell::Switch(_))
    }

    fn flood(&self, seeds: &[(usize, usize)]) -> Vec<bool> {
        let mut seen = vec![false; self.size * self.size];
        let mut queue: VecDeque<(usize, usize)> = VecDeque::new();
        for &(x, y) in seeds {
            if self.passable_static(x, y) && !seen[y * self.size + x] {
                seen[y * self.size + x] = true;
                queue.push_back((x, y));
            }
        }
        while let Some((x, y)) = queue.pop_front() {
            for (nx, ny) in neighbours(x, y, self.size) {
                let idx = ny * self.size + nx;
                if !seen[idx] && self.passable_static(nx, ny) {
                    seen[idx] = true;
                    queue.push_back((nx, ny));
                }
            }
        }
        seen
    }

    fn validate(&self) -> Result<()> {
        let (agents, doors, switches) = self.task.shape();
        if self.starts.len() != agents {
            return Err(Error::Layout(format!(
                "{} needs {agents} start cells, found {}",
                self.task,
                self.starts.len()
            )));
        }
        if self.doors.len() != doors || self.switches.len() != switches {
            return Err(Error::Layout(format!(
                "{} needs {doors} doors and {switches} switches, found {} and {}",
                self.task,
                self.doors.len(),
                self.switches.len()
            )));
        }
        if self.max_steps == 0 {
            return Err(Error::Layout("max_steps must be positive".into()));
        }
        let blocked = |x: isize, y: isize| {
            x < 0
                || y < 0
                || x as usize >= self.size
                || y as usize >= self.size
                || matches!(self.cell(x as usize, y as usize), Cell::Wall | Cell::Door(_))
        };
        for (k, &(x, y)) in self.doors.iter().enumerate() {
            let (x, y) = (x as isize, y as isize);
            let horizontal = blocked(x - 1, y) && blocked(x + 1, y);
            let vertical = blocked(x, y - 1) && blocked(x, y + 1);
            if !(horizontal || vertical) {
                return Err(Error::Layout(format!("door {} is not on a wall segment", k + 1)));
            }
        }
        for &(x, y) in &self.starts {
            if self.is_target(x, y) {
                return Err(Error::Layout(format!("start cell ({x}, {y}) is in the target room")));
            }
            if let Cell::Switch(k) = self.cell(x, y) {
                return Err(Error::Layout(format!("start cell ({x}, {y}) is switch {}", k + 1)));
            }
        }
        Ok(())
    }

    /// Render back to the text format. `parse(render(l)) == l`.
    pub fn render(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "task: {}", self.task);
        let _ = writeln!(out, "max_steps: {}", self.max_steps);
        out.push_str("grid:\n");
        for y in 0..self.size {
            for x in 0..self.size {
                let c = match self.cell(x, y) {
                    Cell::Wall => '#',
                    Cell::Switch(k) => (b'1' + k as u8) as char,
                    Cell::Door(k) => (b'A' + k as u8) as char,
                    Cell::Floor if self.starts.contains(&(x, y)) => 's',
                    Cell::Floor if self.is_target(x, y) => 'T',
                    Cell::Floor => '.',
                };
                out.push(c);
            }
            out.push('\n');
        }
        out
    }

    /// The shipped layout for `task` at `size` cells per side.
    pub fn builtin(task: TaskName, size: usize) -> Result<Self> {
        if size < 12 {
            return Err(Error::Layout(format!("built-in layouts need size >= 12, got {size}")));
        }
        let mut g = Canvas::new(size);
        match task {
            TaskName::Pass => {
                let m = size / 2;
                g.vwall(m, 0, size - 1);
                g.set(m, size / 2, 'A');
                g.fill(m + 1, 0, size - 1, size - 1, 'T');
                g.set((m / 2).saturating_sub(1).max(1), size - 1, '1');
                g.set(size - 3, 0, '2');
                g.set(1, 1, 's');
                g.set(2, 1, 's');
            }
            TaskName::SecretRoom => {
                let m = size / 2;
                let (h1, h2) = (size / 3, 2 * size / 3);
                g.vwall(m, 0, size - 1);
                g.hwall(h1, m + 1, size - 1);
                g.hwall(h2, m + 1, size - 1);
                let rooms = [(0, h1 - 1), (h1 + 1, h2 - 1), (h2 + 1, size - 1)];
                // The bottom room is the target.
                g.fill(m + 1, rooms[2].0, size - 1, rooms[2].1, 'T');
                for (k, &(lo, hi)) in rooms.iter().enumerate() {
                    let mid = (lo + hi) / 2;
                    g.set(m, mid, (b'A' + k as u8) as char);
                    g.set(size - 1, mid, (b'2' + k as u8) as char);
                }
                g.set((m / 2).saturating_sub(1).max(1), size - 1, '1');
                g.set(1, 1, 's');
                g.set(2, 1, 's');
            }
            TaskName::MultiRoom => {
                // Left room L, upper-middle room B (switch 2), upper-right
                // room C (switch 4), bottom-right target room (switch 3).
                let a = size / 3;
                let h = size / 2;
                let b = a + (size - a) / 2;
                g.vwall(a, 0, size - 1);
                g.hwall(h, a + 1, size - 1);
                g.vwall(b, 0, h - 1);
                g.fill(a + 1, h + 1, size - 1, size - 1, 'T');
                g.set(a, h / 2, 'A'); // L -> B
                g.set((a + 1 + b - 1) / 2, h, 'B'); // B -> target
                g.set(b, h / 2, 'C'); // B -> C
                g.set(a, (h + 1 + size - 1) / 2, 'D'); // L -> target
                g.set((b + 1 + size - 1) / 2, h, 'E'); // C -> target
                g.set(2, size - 1, '1');
                g.set((a + 1 + b - 1) / 2, 0, '2');
                g.set(size - 1, size - 1, '3');
                g.set(size - 1, 0, '4');
                g.set(1, 1, 's');
                g.set(2, 1, 's');
                g.set(3, 1, 's');
            }
        }
        let text = format!("task: {task}\nmax_steps: {DEFAULT_MAX_STEPS}\ngrid:\n{}", g.text());
        Self::parse(&text)
    }
}

fn dense(slots: Vec<Option<(usize, usize)>>, what: &str) -> Result<Vec<(usize, usize)>> {
    let count = slots.iter().rposition(Option::is_some).map_or(0, |i| i + 1);
    slots[..count]
        .iter()
        .enumerate()
        .map(|(k, s)| s.ok_or_else(|| Error::Layout(format!("{what} {} missing", k + 1))))
        .collect()
}

pub(crate) fn neighbours(x: usize, y: usize, size: usize) -> impl Iterator<Item = (usize, usize)> {
    let (x, y) = (x as isize, y as isize);
    [(x, y - 1), (x, y + 1), (x - 1, y), (x + 1, y)]
        .into_iter()
        .filter(move |&(nx, ny)| nx >= 0 && ny >= 0 && (nx as usize) < size && (ny as usize) < size)
        .map(|(nx, ny)| (nx as usize, ny as usize))
}

struct Canvas {
    size: usize,
    chars: Vec<char>,
}

impl Canvas {
    fn new(size: usize) -> Self {
        Canvas {
            size,
            chars: vec!['.'; size * size],
        }
    }

    fn set(&mut self, x: usize, y: usize, c: char) {
        self.chars[y * self.size + x] = c;
    }

    fn vwall(&mut self, x: usize, y0: usize, y1: usize) {
        (y0..=y1).for_each(|y| self.set(x, y, '#'));
    }

    fn hwall(&mut self, y: usize, x0: usize, x1: usize) {
        (x0..=x1).for_each(|x| self.set(x, y, '#'));
    }

    fn fill(&mut self, x0: usize, y0: usize, x1: usize, y1: usize, c: char) {
        for y in y0..=y1 {
            for x in x0..=x1 {
                self.set(x, y, c);
            }
        }
    }

    fn text(&self) -> String {
        self.chars
            .chunks(self.size)
            .map(|row| row.iter().collect::<String>() + "\n")
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const SMALL_PASS: &str = "\
; a tiny pass map
task: Pass
max_steps: 20
grid:
s...#TT2
s...#TTT
....ATTT
1...#TTT
....#TTT
....#TTT
....#TTT
....#TTT
";

    #[test]
    fn parses_small_map() {
        let l = Layout::parse(SMALL_PASS).unwrap();
        assert_eq!(l.size, 8);
        assert_eq!(l.max_steps, 20);
        assert_eq!(l.starts, vec![(0, 0), (0, 1)]);
        assert_eq!(l.switches, vec![(0, 3), (7, 0)]);
        assert_eq!(l.doors, vec![(4, 2)]);
        // switch 2 sits inside the target room
        assert!(l.is_target(7, 0));
        assert!(!l.is_target(4, 2));
        assert!(!l.is_target(0, 3));
    }

    #[test]
    fn render_round_trips() {
        for task in [TaskName::Pass, TaskName::SecretRoom, TaskName::MultiRoom] {
            for size in [15, 30] {
                let l = Layout::builtin(task, size).unwrap();
                assert_eq!(Layout::parse(&l.render()).unwrap(), l);
            }
        }
    }

    #[test]
    fn rejects_wrong_agent_count() {
        let text = SMALL_PASS.replacen("s...#TT2\n", "....#TT2\n", 1);
        assert!(matches!(Layout::parse(&text), Err(Error::Layout(_))));
    }

    #[test]
    fn rejects_floating_door() {
        let text = "task: Pass\ngrid:\nss...\n.....\n..A..\n#####\nT..21\n";
        let err = Layout::parse(text).unwrap_err().to_string();
        assert!(err.contains("wall segment"), "{err}");
    }

    #[test]
    fn rejects_unknown_characters() {
        let text = SMALL_PASS.replace("1...#TTT", "1..?#TTT");
        assert!(Layout::parse(&text).is_err());
    }

    #[test]
    fn builtin_shapes() {
        let m = Layout::builtin(TaskName::MultiRoom, 15).unwrap();
        assert_eq!((m.num_agents(), m.num_doors(), m.switches.len()), (3, 5, 4));
        // switch 3 is in the target room, the others are not
        assert!(m.is_target(m.switches[2].0, m.switches[2].1));
        for k in [0, 1, 3] {
            assert!(!m.is_target(m.switches[k].0, m.switches[k].1));
        }
        let s = Layout::builtin(TaskName::SecretRoom, 15).unwrap();
        assert_eq!((s.num_agents(), s.num_doors(), s.switches.len()), (2, 3, 4));
        assert!(Layout::builtin(TaskName::Pass, 8).is_err());
    }
}
