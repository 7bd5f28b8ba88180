//! Page-granular storage: a header page, node pages, an intrusive free list
//! and a bounded write-through page cache.
//!
//! File layout: page `n` lives at byte offset `n << page_bits`. Page 0 is the
//! header and never a node, so page number 0 doubles as the null link.
//!
//! ```text
//! header offset  size  field
//! 0              4     magic "BLNK"
//! 4              1     format version (1)
//! 5              1     page_bits
//! 6              2     reserved, zero
//! 8              8     root_page
//! 16             8     top_page (highest allocated page number)
//! 24             8     free_head (0 = empty free list)
//! 32             8     free_count
//! ```
//!
//! A free page is zero except for its first 8 bytes, which hold the next free
//! page number.

use std::collections::HashSet;
use std::fs::{File, OpenOptions};
use std::io;
use std::num::NonZeroUsize;
use std::os::unix::fs::FileExt;
use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use lru::LruCache;
use parking_lot::{Mutex, RwLock};
use thiserror::Error;

use crate::page_format::{FormatError, Node, PageConfig};
use crate::PageNo;

pub const MAGIC: &[u8; 4] = b"BLNK";
pub const FORMAT_VERSION: u8 = 1;
pub const HEADER_PAGE: PageNo = 0;
pub const ROOT_PAGE: PageNo = 1;
pub const DEFAULT_CACHE_PAGES: usize = 65536;

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),
    #[error("incompatible file: {0}")]
    Incompatible(String),
    #[error(transparent)]
    Config(#[from] FormatError),
    #[error("page {0} out of range")]
    OutOfRange(PageNo),
    #[error("page {0} freed twice")]
    DoubleFree(PageNo),
    #[error("access to free page {0}")]
    UseAfterFree(PageNo),
    #[error("storage exhausted")]
    Exhausted,
    #[error("corrupt store: {0}")]
    Corrupt(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FileHeader {
    pub page_bits: u8,
    pub root_page: PageNo,
    pub top_page: PageNo,
    pub free_head: PageNo,
    pub free_count: u64,
}

impl FileHeader {
    const LEN: usize = 40;

    fn encode(&self, page: &mut [u8]) {
        page[..Self::LEN].fill(0);
        page[0..4].copy_from_slice(MAGIC);
        page[4] = FORMAT_VERSION;
        page[5] = self.page_bits;
        page[8..16].copy_from_slice(&self.root_page.to_le_bytes());
        page[16..24].copy_from_slice(&self.top_page.to_le_bytes());
        page[24..32].copy_from_slice(&self.free_head.to_le_bytes());
        page[32..40].copy_from_slice(&self.free_count.to_le_bytes());
    }

    fn decode(bytes: &[u8]) -> Result<Self, StoreError> {
        if bytes.len() < Self::LEN || &bytes[0..4] != MAGIC {
            return Err(StoreError::Incompatible("bad magic".into()));
        }
        if bytes[4] != FORMAT_VERSION {
            return Err(StoreError::Incompatible(format!("format version {}", bytes[4])));
        }
        let u64_at = |at: usize| u64::from_le_bytes(bytes[at..at + 8].try_into().unwrap());
        let header = FileHeader {
            page_bits: bytes[5],
            root_page: u64_at(8),
            top_page: u64_at(16),
            free_head: u64_at(24),
            free_count: u64_at(32),
        };
        PageConfig::new(header.page_bits)
            .map_err(|_| StoreError::Incompatible(format!("page_bits {}", header.page_bits)))?;
        if header.root_page != ROOT_PAGE || header.top_page < ROOT_PAGE {
            return Err(StoreError::Corrupt("header root/top out of range".into()));
        }
        Ok(header)
    }
}

#[derive(Debug, Clone)]
pub struct StoreOptions {
    /// Cached pages; 0 disables the cache.
    pub cache_pages: usize,
    /// Upper bound on `top_page`, for exercising exhaustion.
    pub max_pages: Option<u64>,
}

impl Default for StoreOptions {
    fn default() -> Self {
        Self { cache_pages: DEFAULT_CACHE_PAGES, max_pages: None }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct StoreStats {
    pub reads: u64,
    pub writes: u64,
    pub cache_hits: u64,
    pub allocs: u64,
    pub frees: u64,
    pub use_after_free: u64,
}

enum Backing {
    File(File),
    Memory(RwLock<Vec<Mutex<Box<[u8]>>>>),
}

impl Backing {
    fn read(&self, page: PageNo, buf: &mut [u8]) -> io::Result<()> {
        match self {
            Backing::File(f) => f.read_exact_at(buf, page * buf.len() as u64),
            Backing::Memory(pages) => {
                let pages = pages.read();
                let src = pages
                    .get(page as usize)
                    .ok_or_else(|| io::Error::new(io::ErrorKind::UnexpectedEof, "page beyond end"))?;
                buf.copy_from_slice(&src.lock());
                Ok(())
            }
        }
    }

    fn write(&self, page: PageNo, data: &[u8]) -> io::Result<()> {
        match self {
            Backing::File(f) => f.write_all_at(data, page * data.len() as u64),
            Backing::Memory(pages) => {
                {
                    let pages = pages.read();
                    if let Some(dst) = pages.get(page as usize) {
                        dst.lock().copy_from_slice(data);
                        return Ok(());
                    }
                }
                let mut pages = pages.write();
                while pages.len() <= page as usize {
                    pages.push(Mutex::new(vec![0; data.len()].into_boxed_slice()));
                }
                pages[page as usize].lock().copy_from_slice(data);
                Ok(())
            }
        }
    }
}

#[derive(Default)]
struct Counters {
    reads: AtomicU64,
    writes: AtomicU64,
    cache_hits: AtomicU64,
    allocs: AtomicU64,
    frees: AtomicU64,
    use_after_free: AtomicU64,
}

/// Page storage for one tree file (or an in-memory image).
pub struct PageStore {
    cfg: PageConfig,
    backing: Backing,
    cache: Option<Mutex<LruCache<PageNo, Arc<[u8]>>>>,
    header: Mutex<FileHeader>,
    top: AtomicU64,
    free_set: RwLock<HashSet<PageNo>>,
    max_pages: Option<u64>,
    counters: Counters,
}

impl std::fmt::Debug for PageStore {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("PageStore").field("cfg", &self.cfg).field("header", &*self.header.lock()).finish()
    }
}

impl PageStore {
    /// Creates a new store holding a header and an empty leaf root. A file
    /// path must be absent or name an empty file.
    pub fn create(path: Option<&Path>, cfg: PageConfig, opts: &StoreOptions) -> Result<Self, StoreError> {
        let backing = match path {
            Some(p) => {
                let file = OpenOptions::new().read(true).write(true).create(true).truncate(false).open(p)?;
                if file.metadata()?.len() != 0 {
                    return Err(StoreError::Incompatible(format!("{} is not empty", p.display())));
                }
                Backing::File(file)
            }
            None => Backing::Memory(RwLock::new(Vec::new())),
        };
        let header = FileHeader {
            page_bits: cfg.page_bits(),
            root_page: ROOT_PAGE,
            top_page: ROOT_PAGE,
            free_head: 0,
            free_count: 0,
        };
        let store = Self::assemble(cfg, backing, header, HashSet::new(), opts);
        store.write_header(&header)?;
        store.write_raw(ROOT_PAGE, Node::empty_leaf(cfg).as_bytes())?;
        Ok(store)
    }

    /// Opens an existing file, optionally insisting on a page size.
    pub fn open(path: &Path, expect_bits: Option<u8>, opts: &StoreOptions) -> Result<Self, StoreError> {
        if let Some(bits) = expect_bits {
            PageConfig::new(bits)?;
        }
        let file = OpenOptions::new().read(true).write(true).open(path)?;
        let mut head = [0u8; FileHeader::LEN];
        file.read_exact_at(&mut head, 0)
            .map_err(|_| StoreError::Incompatible("file too short for a header".into()))?;
        let header = FileHeader::decode(&head)?;
        if let Some(bits) = expect_bits {
            if bits != header.page_bits {
                return Err(StoreError::Incompatible(format!(
                    "file has page_bits {}, requested {}",
                    header.page_bits, bits
                )));
            }
        }
        let cfg = PageConfig::new(header.page_bits)?;
        let need = (header.top_page + 1) << header.page_bits;
        if file.metadata()?.len() < need {
            return Err(StoreError::Corrupt("file shorter than top_page".into()));
        }
        let store = Self::assemble(cfg, Backing::File(file), header, HashSet::new(), opts);
        let chain = store.walk_free_chain(&header)?;
        *store.free_set.write() = chain.into_iter().collect();
        Ok(store)
    }

    fn assemble(
        cfg: PageConfig,
        backing: Backing,
        header: FileHeader,
        free_set: HashSet<PageNo>,
        opts: &StoreOptions,
    ) -> Self {
        let cache = NonZeroUsize::new(opts.cache_pages).map(|n| Mutex::new(LruCache::new(n)));
        Self {
            cfg,
            backing,
            cache,
            top: AtomicU64::new(header.top_page),
            header: Mutex::new(header),
            free_set: RwLock::new(free_set),
            max_pages: opts.max_pages,
            counters: Counters::default(),
        }
    }

    pub fn config(&self) -> PageConfig {
        self.cfg
    }

    pub fn page_size(&self) -> usize {
        self.cfg.page_size()
    }

    pub fn header(&self) -> FileHeader {
        *self.header.lock()
    }

    pub fn top_page(&self) -> PageNo {
        self.top.load(Ordering::Acquire)
    }

    pub fn is_free(&self, page: PageNo) -> bool {
        self.free_set.read().contains(&page)
    }

    fn check_live(&self, page: PageNo) -> Result<(), StoreError> {
        if page == HEADER_PAGE || page > self.top_page() {
            return Err(StoreError::OutOfRange(page));
        }
        if self.is_free(page) {
            self.counters.use_after_free.fetch_add(1, Ordering::Relaxed);
            debug_assert!(false, "access to free page {page}");
            return Err(StoreError::UseAfterFree(page));
        }
        Ok(())
    }

    /// Returns the last image written to `page`.
    pub fn read_page(&self, page: PageNo) -> Result<Vec<u8>, StoreError> {
        self.check_live(page)?;
        self.read_raw(page)
    }

    /// Writes through to the backing store before returning.
    pub fn write_page(&self, page: PageNo, bytes: &[u8]) -> Result<(), StoreError> {
        if bytes.len() != self.page_size() {
            return Err(StoreError::Corrupt(format!("write of {} bytes", bytes.len())));
        }
        self.check_live(page)?;
        self.write_raw(page, bytes)
    }

    fn read_raw(&self, page: PageNo) -> Result<Vec<u8>, StoreError> {
        self.counters.reads.fetch_add(1, Ordering::Relaxed);
        if let Some(cache) = &self.cache {
            if let Some(img) = cache.lock().get(&page) {
                self.counters.cache_hits.fetch_add(1, Ordering::Relaxed);
                return Ok(img.to_vec());
            }
        }
        let mut buf = vec![0; self.page_size()];
        self.backing.read(page, &mut buf)?;
        if let Some(cache) = &self.cache {
            cache.lock().put(page, Arc::from(&buf[..]));
        }
        Ok(buf)
    }

    fn write_raw(&self, page: PageNo, bytes: &[u8]) -> Result<(), StoreError> {
        self.counters.writes.fetch_add(1, Ordering::Relaxed);
        self.backing.write(page, bytes)?;
        if let Some(cache) = &self.cache {
            cache.lock().put(page, Arc::from(bytes));
        }
        Ok(())
    }

    fn write_header(&self, header: &FileHeader) -> Result<(), StoreError> {
        let mut page = vec![0; self.page_size()];
        header.encode(&mut page);
        self.write_raw(HEADER_PAGE, &page)
    }

    fn next_free(&self, page: PageNo) -> Result<PageNo, StoreError> {
        let img = self.read_raw(page)?;
        Ok(u64::from_le_bytes(img[..8].try_into().unwrap()))
    }

    /// Pops the free list, or extends the store. The page comes back zeroed.
    pub fn alloc_page(&self) -> Result<PageNo, StoreError> {
        let mut header = self.header.lock();
        let page = if header.free_head != 0 {
            let page = header.free_head;
            header.free_head = self.next_free(page)?;
            header.free_count -= 1;
            self.free_set.write().remove(&page);
            page
        } else {
            let next = header.top_page + 1;
            if self.max_pages.is_some_and(|max| next > max) {
                return Err(StoreError::Exhausted);
            }
            header.top_page = next;
            self.top.store(next, Ordering::Release);
            next
        };
        self.write_raw(page, &vec![0; self.page_size()])?;
        self.write_header(&header)?;
        self.counters.allocs.fetch_add(1, Ordering::Relaxed);
        Ok(page)
    }

    /// Links `page` onto the free list.
    pub fn free_page(&self, page: PageNo) -> Result<(), StoreError> {
        if page == HEADER_PAGE || page > self.top_page() {
            return Err(StoreError::OutOfRange(page));
        }
        if page == ROOT_PAGE {
            return Err(StoreError::Corrupt("attempt to free the root page".into()));
        }
        let mut header = self.header.lock();
        if !self.free_set.write().insert(page) {
            return Err(StoreError::DoubleFree(page));
        }
        let mut img = vec![0; self.page_size()];
        img[..8].copy_from_slice(&header.free_head.to_le_bytes());
        self.write_raw(page, &img)?;
        header.free_head = page;
        header.free_count += 1;
        self.write_header(&header)?;
        self.counters.frees.fetch_add(1, Ordering::Relaxed);
        Ok(())
    }

    /// Free pages in chain order.
    pub fn free_list(&self) -> Result<Vec<PageNo>, StoreError> {
        let header = self.header.lock();
        self.walk_free_chain(&header)
    }

    fn walk_free_chain(&self, header: &FileHeader) -> Result<Vec<PageNo>, StoreError> {
        let mut seen = HashSet::new();
        let mut out = Vec::new();
        let mut cur = header.free_head;
        while cur != 0 {
            if cur <= ROOT_PAGE || cur > header.top_page {
                return Err(StoreError::Corrupt(format!("free chain reaches page {cur}")));
            }
            if !seen.insert(cur) {
                return Err(StoreError::Corrupt(format!("free chain revisits page {cur}")));
            }
            out.push(cur);
            cur = self.next_free(cur)?;
        }
        if out.len() as u64 != header.free_count {
            return Err(StoreError::Corrupt(format!(
                "free chain has {} pages, header says {}",
                out.len(),
                header.free_count
            )));
        }
        Ok(out)
    }

    pub fn sync(&self) -> Result<(), StoreError> {
        if let Backing::File(f) = &self.backing {
            f.sync_all()?;
        }
        Ok(())
    }

    pub fn stats(&self) -> StoreStats {
        let c = &self.counters;
        StoreStats {
            reads: c.reads.load(Ordering::Relaxed),
            writes: c.writes.load(Ordering::Relaxed),
            cache_hits: c.cache_hits.load(Ordering::Relaxed),
            allocs: c.allocs.load(Ordering::Relaxed),
            frees: c.frees.load(Ordering::Relaxed),
            use_after_free: c.use_after_free.load(Ordering::Relaxed),
        }
    }

    /// Overwrites a page without any checks. Test fixtures use this to
    /// inject corruption.
    #[doc(hidden)]
    pub fn write_page_unchecked(&self, page: PageNo, bytes: &[u8]) -> Result<(), StoreError> {
        self.write_raw(page, bytes)
    }
}
